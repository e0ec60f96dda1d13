#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "drfpn/pyramid.hpp"

namespace drfpn {

// Desk-scale run configuration, parseable from plain "key = value" text.
struct RunConfig {
    PyramidConfig model;
    std::uint64_t seed = 42;
    long image_size = 64;
    long dataset_size = 16;
    long steps = 500;
    double lr = 1e-5;
    double momentum = 0.9;
    long log_every = 50;
    std::string out_dir = "out";

    // Desk defaults: C=32, PPM bins (1,2) so every bin fits the 2x2 C5 of a
    // 64px image.
    static RunConfig defaults();
    static RunConfig parse_file(const std::string& path);
    static RunConfig parse_text(const std::string& text);
    void validate() const;
};

struct Blob {
    int scale_class;  // 0 small, 1 medium, 2 large
    double cx, cy;    // center, image pixel units
    double sigma;     // image pixel units
    int level;        // pyramid level the blob is assigned to (2..4)
};

// One synthetic image with per-pyramid-level heatmap targets. Each blob
// appears in exactly one level's target, chosen by its scale class.
struct SyntheticSample {
    Tensor image;                    // (1,3,H,W)
    std::array<Tensor, 4> targets;   // (1,1,H/stride,W/stride) per level 2..5
    std::vector<Blob> blobs;
};

std::vector<SyntheticSample> gen_dataset(std::uint64_t seed, long count, long image_size);

// Backbone -> pyramid (per config) -> per-level 1-channel heads.
std::array<Tensor, 4> model_forward(const Tensor& image, ModelParams& reg,
                                    const PyramidConfig& cfg);

struct TrainReport {
    std::vector<double> step_losses;
    double initial_loss = 0.0;  // mean dataset loss before training
    double final_loss = 0.0;    // mean dataset loss after training
    ModelParams params;
};

TrainReport train(const RunConfig& cfg);

// Mean dataset loss (sum over levels of per-level MSE) for fixed params.
double dataset_loss(ModelParams& reg, const PyramidConfig& cfg,
                    const std::vector<SyntheticSample>& ds);

using PredictFn = std::function<std::array<Tensor, 4>(const SyntheticSample&)>;

struct EvalMetrics {
    std::array<double, 4> level_mse{};
    long hits = 0;
    long total_blobs = 0;
    double hit_rate = 0.0;  // fraction of blobs localized within 1 pixel
};

EvalMetrics evaluate(const PredictFn& predict, const std::vector<SyntheticSample>& ds);

// Writes one min-max-normalized PGM and one raw-value CSV per (level,
// channel), plus an index CSV. Returns the written file names.
std::vector<std::string> dump_features(ModelParams& reg, const PyramidConfig& cfg,
                                       const Tensor& image, const std::string& out_dir,
                                       long channels_per_level);

struct BenchReport {
    double forward_ms = 0.0;
    double backward_ms = 0.0;
    double fpn_forward_ms = 0.0;
    double drfpn_vs_fpn_ratio = 0.0;
    std::vector<std::pair<std::string, double>> breakdown_ms;  // forward sections
};

BenchReport bench(const RunConfig& cfg, int repeats);

// Loss log / metrics as CSV; both use write-to-temp-then-rename.
void write_loss_csv(const std::vector<double>& losses, const std::string& path);
void write_metrics_csv(const EvalMetrics& m, const std::string& path);
void write_text_file(const std::string& content, const std::string& path);

}  // namespace drfpn
