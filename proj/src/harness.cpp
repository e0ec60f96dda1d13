#include "drfpn/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace drfpn {

namespace fs = std::filesystem;

RunConfig RunConfig::defaults() {
    RunConfig cfg;
    cfg.model.channels = 32;
    cfg.model.ppm_bins = {1, 2};
    return cfg;
}

namespace {

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

long parse_long(const std::string& v, const std::string& key) {
    try {
        std::size_t pos;
        long r = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected integer, got '" + v + "'");
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected number, got '" + v + "'");
    }
}

std::vector<long> parse_long_list(const std::string& v, const std::string& key) {
    std::vector<long> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_long(trim(item), key));
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

}  // namespace

RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig cfg = defaults();
    std::stringstream ss(text);
    std::string line;
    long lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "seed") {
            cfg.seed = static_cast<std::uint64_t>(parse_long(val, key));
        } else if (key == "image_size") {
            cfg.image_size = parse_long(val, key);
        } else if (key == "dataset_size") {
            cfg.dataset_size = parse_long(val, key);
        } else if (key == "steps") {
            cfg.steps = parse_long(val, key);
        } else if (key == "lr") {
            cfg.lr = parse_double(val, key);
        } else if (key == "momentum") {
            cfg.momentum = parse_double(val, key);
        } else if (key == "log_every") {
            cfg.log_every = parse_long(val, key);
        } else if (key == "out_dir") {
            cfg.out_dir = val;
        } else if (key == "channels") {
            cfg.model.channels = parse_long(val, key);
        } else if (key == "srb_enabled") {
            cfg.model.srb_enabled = parse_bool(val, key);
        } else if (key == "crb_enabled") {
            cfg.model.crb_enabled = parse_bool(val, key);
        } else if (key == "ppm_enabled") {
            cfg.model.ppm_enabled = parse_bool(val, key);
        } else if (key == "placement") {
            if (val == "td_srb_bu_crb") cfg.model.placement = Placement::td_srb_bu_crb;
            else if (val == "td_crb_bu_srb") cfg.model.placement = Placement::td_crb_bu_srb;
            else if (val == "td_srb_crb") cfg.model.placement = Placement::td_srb_crb;
            else throw ConfigError("placement: unknown value '" + val + "'");
        } else if (key == "ppm_bins") {
            cfg.model.ppm_bins = parse_long_list(val, key);
        } else if (key == "compression") {
            cfg.model.compression = parse_long(val, key);
        } else if (key == "upsample") {
            if (val == "nearest") cfg.model.upsample = Upsample::nearest;
            else if (val == "bilinear") cfg.model.upsample = Upsample::bilinear;
            else throw ConfigError("upsample: unknown value '" + val + "'");
        } else if (key == "crb_refine_kernel") {
            cfg.model.crb_refine_kernel = parse_long(val, key);
        } else if (key == "crb_out_kernel") {
            cfg.model.crb_out_kernel = parse_long(val, key);
        } else if (key == "srb_shared_stem") {
            cfg.model.srb_shared_stem = parse_bool(val, key);
        } else if (key == "gate_source") {
            if (val == "low") cfg.model.gate_source = GateSource::low;
            else if (val == "high") cfg.model.gate_source = GateSource::high;
            else if (val == "add") cfg.model.gate_source = GateSource::add;
            else if (val == "cat") cfg.model.gate_source = GateSource::cat;
            else throw ConfigError("gate_source: unknown value '" + val + "'");
        } else {
            throw ConfigError("unknown key '" + key + "' on line " + std::to_string(lineno));
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str());
}

void RunConfig::validate() const {
    if (image_size < 32 || image_size % 32 != 0) {
        throw ConfigError("image_size must be a positive multiple of 32");
    }
    if (dataset_size < 0) throw ConfigError("dataset_size must be >= 0");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (lr < 0.0) throw ConfigError("lr must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
    model.validate();
}

namespace {

// Blob scale classes: sigma in image pixels and the level that owns the blob.
constexpr double kSigmas[3] = {2.0, 4.0, 8.0};
constexpr int kLevels[3] = {2, 3, 4};

}  // namespace

std::vector<SyntheticSample> gen_dataset(std::uint64_t seed, long count, long image_size) {
    if (image_size % 32 != 0) throw ConfigError("gen_dataset: image_size must be divisible by 32");
    Rng rng(seed ^ 0xd1f0e5d4a7b3c291ull);
    std::vector<SyntheticSample> ds;
    ds.reserve(count);
    const long hs = image_size;
    constexpr long kBlobs = 3;
    for (long s = 0; s < count; ++s) {
        SyntheticSample sample;
        sample.image = Tensor::randn(Shape4{1, 3, hs, hs}, rng, 0.0, 0.1);
        // Centers kept inside a margin and pairwise separated so each blob is
        // a distinct peak at every level resolution.
        std::vector<Blob> blobs;
        while (static_cast<long>(blobs.size()) < kBlobs) {
            const int cls = static_cast<int>(rng.next_u64() % 3);
            const double margin = 12.0;
            Blob b{cls, rng.uniform(margin, hs - margin), rng.uniform(margin, hs - margin),
                   kSigmas[cls], kLevels[cls]};
            bool ok = true;
            for (const Blob& other : blobs) {
                if (std::abs(b.cx - other.cx) < 20.0 && std::abs(b.cy - other.cy) < 20.0) ok = false;
            }
            if (ok) blobs.push_back(b);
        }
        sample.blobs = blobs;
        for (const Blob& b : blobs) {
            for (long c = 0; c < 3; ++c) {
                for (long i = 0; i < hs; ++i) {
                    for (long j = 0; j < hs; ++j) {
                        const double dx = (static_cast<double>(j) + 0.5) - b.cx;
                        const double dy = (static_cast<double>(i) + 0.5) - b.cy;
                        sample.image.at(0, c, i, j) +=
                            std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
                    }
                }
            }
        }
        for (int l = 2; l <= 5; ++l) {
            const long stride = PyramidLevels::strides[l - 2];
            const long ext = hs / stride;
            Tensor t = Tensor::zeros(Shape4{1, 1, ext, ext});
            for (const Blob& b : blobs) {
                if (b.level != l) continue;
                const double st = 0.75;  // heatmap width in level pixels
                for (long i = 0; i < ext; ++i) {
                    for (long j = 0; j < ext; ++j) {
                        const double px = (static_cast<double>(j) + 0.5) * stride;
                        const double py = (static_cast<double>(i) + 0.5) * stride;
                        const double d2 = (px - b.cx) * (px - b.cx) + (py - b.cy) * (py - b.cy);
                        const double v =
                            std::exp(-d2 / (2.0 * st * st * stride * stride));
                        t.at(0, 0, i, j) = std::max(t.at(0, 0, i, j), v);
                    }
                }
            }
            sample.targets[l - 2] = t;
        }
        ds.push_back(std::move(sample));
    }
    return ds;
}

std::array<Tensor, 4> model_forward(const Tensor& image, ModelParams& reg,
                                    const PyramidConfig& cfg) {
    PyramidLevels feats = toy_backbone(image, reg);
    PyramidLevels out = drfpn_forward(feats, cfg, reg);
    std::array<Tensor, 4> heat;
    for (int l = 2; l <= 5; ++l) heat[l - 2] = head_forward(out.level(l), reg, l, cfg);
    return heat;
}

namespace {

Tensor sample_loss(const SyntheticSample& s, ModelParams& reg, const PyramidConfig& cfg) {
    std::array<Tensor, 4> pred = model_forward(s.image, reg, cfg);
    Tensor total;
    for (int i = 0; i < 4; ++i) {
        Tensor d = sub(pred[i], s.targets[i]);
        Tensor mse = reduce_mean(mul(d, d));
        total = total.defined() ? add(total, mse) : mse;
    }
    return total;
}

}  // namespace

double dataset_loss(ModelParams& reg, const PyramidConfig& cfg,
                    const std::vector<SyntheticSample>& ds) {
    double acc = 0.0;
    for (const auto& s : ds) acc += (*sample_loss(s, reg, cfg).data)[0];
    return ds.empty() ? 0.0 : acc / static_cast<double>(ds.size());
}

TrainReport train(const RunConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    TrainReport report;
    report.params = build_params(cfg.model, root.child(0).next_u64(), true);
    auto ds = gen_dataset(root.child(1).next_u64(), cfg.dataset_size, cfg.image_size);
    if (cfg.steps > 0 && ds.empty()) throw ConfigError("train: dataset_size is 0 but steps > 0");

    report.initial_loss = dataset_loss(report.params, cfg.model, ds);
    SgdOptimizer opt(cfg.lr, cfg.momentum);
    for (long step = 0; step < cfg.steps; ++step) {
        const SyntheticSample& s = ds[step % ds.size()];
        Tape tape;
        report.params.watch_all(tape);
        Tensor loss = sample_loss(s, report.params, cfg.model);
        const double value = (*loss.data)[0];
        if (!std::isfinite(value)) {
            std::ostringstream diag;
            diag << "train: non-finite loss " << value << " at step " << step << " (sample "
                 << step % ds.size() << ", lr " << cfg.lr << ", momentum " << cfg.momentum << ")";
            throw ContractError(diag.str());
        }
        report.step_losses.push_back(value);
        tape.backward(loss);
        opt.step(report.params, report.params.grads(tape));
    }
    report.final_loss = dataset_loss(report.params, cfg.model, ds);
    return report;
}

namespace {

struct Peak {
    long i, j;
    double v;
};

std::vector<Peak> local_maxima(const Tensor& map) {
    std::vector<Peak> peaks;
    const long h = map.shape.h, w = map.shape.w;
    for (long i = 0; i < h; ++i) {
        for (long j = 0; j < w; ++j) {
            const double v = map.at(0, 0, i, j);
            bool top = true;
            for (long di = -1; di <= 1 && top; ++di) {
                for (long dj = -1; dj <= 1 && top; ++dj) {
                    if (di == 0 && dj == 0) continue;
                    const long ni = i + di, nj = j + dj;
                    if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
                    if (map.at(0, 0, ni, nj) >= v) top = false;
                }
            }
            if (top) peaks.push_back({i, j, v});
        }
    }
    std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.v > b.v; });
    return peaks;
}

}  // namespace

EvalMetrics evaluate(const PredictFn& predict, const std::vector<SyntheticSample>& ds) {
    EvalMetrics m;
    std::array<double, 4> sse{};
    std::array<long, 4> counts{};
    for (const auto& s : ds) {
        std::array<Tensor, 4> pred = predict(s);
        for (int li = 0; li < 4; ++li) {
            if (!(pred[li].shape == s.targets[li].shape)) {
                throw ContractError("evaluate: prediction shape " + pred[li].shape.str() +
                                    " does not match target " + s.targets[li].shape.str());
            }
            for (long i = 0; i < pred[li].elems(); ++i) {
                const double d = (*pred[li].data)[i] - (*s.targets[li].data)[i];
                sse[li] += d * d;
            }
            counts[li] += pred[li].elems();

            long level_blobs = 0;
            for (const Blob& b : s.blobs) level_blobs += (b.level == li + 2) ? 1 : 0;
            if (level_blobs == 0) continue;
            auto peaks = local_maxima(pred[li]);
            peaks.resize(std::min<std::size_t>(peaks.size(), level_blobs));
            const long stride = PyramidLevels::strides[li];
            for (const Blob& b : s.blobs) {
                if (b.level != li + 2) continue;
                ++m.total_blobs;
                const long ti = std::lround(b.cy / stride - 0.5);
                const long tj = std::lround(b.cx / stride - 0.5);
                for (const Peak& p : peaks) {
                    if (std::abs(p.i - ti) <= 1 && std::abs(p.j - tj) <= 1) {
                        ++m.hits;
                        break;
                    }
                }
            }
        }
    }
    for (int li = 0; li < 4; ++li) m.level_mse[li] = counts[li] ? sse[li] / counts[li] : 0.0;
    m.hit_rate = m.total_blobs ? static_cast<double>(m.hits) / m.total_blobs : 0.0;
    return m;
}

void write_text_file(const std::string& content, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open " + tmp + " for writing");
        out << content;
        if (!out) throw FormatError("write failed: " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw FormatError("rename " + tmp + " -> " + path + ": " + ec.message());
}

void write_loss_csv(const std::vector<double>& losses, const std::string& path) {
    std::ostringstream os;
    os << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", losses[i]);
        os << i << "," << buf << "\n";
    }
    write_text_file(os.str(), path);
}

void write_metrics_csv(const EvalMetrics& m, const std::string& path) {
    std::ostringstream os;
    os << "metric,value\n";
    for (int l = 0; l < 4; ++l) os << "mse_level" << l + 2 << "," << m.level_mse[l] << "\n";
    os << "hits," << m.hits << "\n";
    os << "total_blobs," << m.total_blobs << "\n";
    os << "hit_rate," << m.hit_rate << "\n";
    write_text_file(os.str(), path);
}

std::vector<std::string> dump_features(ModelParams& reg, const PyramidConfig& cfg,
                                       const Tensor& image, const std::string& out_dir,
                                       long channels_per_level) {
    fs::create_directories(out_dir);
    PyramidLevels feats = toy_backbone(image, reg);
    PyramidLevels out = drfpn_forward(feats, cfg, reg);
    std::vector<std::string> files;
    std::ostringstream index;
    index << "file,level,channel,format\n";
    for (int l = 2; l <= 5; ++l) {
        const Tensor& map = out.level(l);
        const long k = std::min(channels_per_level, map.shape.c);
        for (long c = 0; c < k; ++c) {
            double lo = map.at(0, c, 0, 0), hi = lo;
            for (long i = 0; i < map.shape.h; ++i) {
                for (long j = 0; j < map.shape.w; ++j) {
                    lo = std::min(lo, map.at(0, c, i, j));
                    hi = std::max(hi, map.at(0, c, i, j));
                }
            }
            const std::string stem = "level" + std::to_string(l) + "_ch" + std::to_string(c);
            std::ostringstream pgm;
            pgm << "P2\n" << map.shape.w << " " << map.shape.h << "\n255\n";
            for (long i = 0; i < map.shape.h; ++i) {
                for (long j = 0; j < map.shape.w; ++j) {
                    // Constant maps (max == min) render as mid-gray.
                    const int g = hi > lo
                                      ? static_cast<int>(std::lround((map.at(0, c, i, j) - lo) /
                                                                     (hi - lo) * 255.0))
                                      : 128;
                    pgm << g << (j + 1 < map.shape.w ? " " : "\n");
                }
            }
            std::ostringstream csv;
            for (long i = 0; i < map.shape.h; ++i) {
                for (long j = 0; j < map.shape.w; ++j) {
                    char buf[40];
                    std::snprintf(buf, sizeof buf, "%.17g", map.at(0, c, i, j));
                    csv << buf << (j + 1 < map.shape.w ? "," : "\n");
                }
            }
            const std::string pgm_path = (fs::path(out_dir) / (stem + ".pgm")).string();
            const std::string csv_path = (fs::path(out_dir) / (stem + ".csv")).string();
            write_text_file(pgm.str(), pgm_path);
            write_text_file(csv.str(), csv_path);
            files.push_back(pgm_path);
            files.push_back(csv_path);
            index << stem << ".pgm," << l << "," << c << ",pgm\n";
            index << stem << ".csv," << l << "," << c << ",csv\n";
        }
    }
    const std::string index_path = (fs::path(out_dir) / "index.csv").string();
    write_text_file(index.str(), index_path);
    files.push_back(index_path);
    return files;
}

BenchReport bench(const RunConfig& cfg, int repeats) {
    cfg.validate();
    Rng root(cfg.seed);
    ModelParams reg = build_params(cfg.model, root.child(0).next_u64(), true);
    PyramidConfig fpn_cfg = cfg.model;
    fpn_cfg.srb_enabled = fpn_cfg.crb_enabled = fpn_cfg.ppm_enabled = false;
    ModelParams fpn_reg = build_params(fpn_cfg, root.child(0).next_u64(), true);
    Rng data = root.child(1);
    Tensor image = Tensor::randn(Shape4{1, 3, cfg.image_size, cfg.image_size}, data);

    auto time_ms = [](auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        return std::chrono::duration<double, std::milli>(t1 - t0).count();
    };
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };

    BenchReport rep;
    std::vector<double> fwd, bwd, fpn_fwd, t_backbone, t_pyramid, t_heads;
    for (int r = -1; r < repeats; ++r) {  // r == -1 is warmup
        Tape tape;
        reg.watch_all(tape);
        PyramidLevels feats;
        PyramidLevels out;
        Tensor loss;
        double tb = time_ms([&] { feats = toy_backbone(image, reg); });
        double tp = time_ms([&] { out = drfpn_forward(feats, cfg.model, reg); });
        double th = time_ms([&] {
            Tensor total;
            for (int l = 2; l <= 5; ++l) {
                Tensor s = reduce_mean(head_forward(out.level(l), reg, l, cfg.model));
                total = total.defined() ? add(total, s) : s;
            }
            loss = total;
        });
        double tw = time_ms([&] { tape.backward(loss); });
        double tf = time_ms([&] {
            PyramidLevels f2 = toy_backbone(image, fpn_reg);
            (void)fpn_forward(f2, fpn_reg, fpn_cfg);
        });
        if (r < 0) continue;
        t_backbone.push_back(tb);
        t_pyramid.push_back(tp);
        t_heads.push_back(th);
        fwd.push_back(tb + tp + th);
        bwd.push_back(tw);
        fpn_fwd.push_back(tf);
    }
    rep.forward_ms = median(fwd);
    rep.backward_ms = median(bwd);
    rep.fpn_forward_ms = median(fpn_fwd);
    rep.drfpn_vs_fpn_ratio = rep.fpn_forward_ms > 0 ? rep.forward_ms / rep.fpn_forward_ms : 0.0;
    rep.breakdown_ms = {{"backbone", median(t_backbone)},
                        {"pyramid", median(t_pyramid)},
                        {"heads", median(t_heads)}};
    return rep;
}

}  // namespace drfpn
