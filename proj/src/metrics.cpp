#include "e2i/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace e2i {

using nlohmann::json;

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b) || a.size() != b.size()) {
        std::ostringstream msg;
        msg << what << ": image shapes differ (" << a.height << "x" << a.width << " vs " << b.height << "x"
            << b.width << ")";
        throw DimensionError(msg.str());
    }
}

Image downsample2(const Image& img) {
    Image out(img.height / 2, img.width / 2);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                out.at(y, x, c) = 0.25f * (img.at(2 * y, 2 * x, c) + img.at(2 * y + 1, 2 * x, c) +
                                           img.at(2 * y, 2 * x + 1, c) + img.at(2 * y + 1, 2 * x + 1, c));
            }
        }
    }
    return out;
}

int reflect(int i, int n) {
    if (n == 1) return 0;
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
}

constexpr int kScales = 3;
constexpr int kGlobalGrid = 4;

}  // namespace

RandomConvFeatures::RandomConvFeatures(std::uint64_t seed, int channels) : channels_(channels) {
    if (channels < 1) {
        throw ConfigError("feature extractor needs at least one channel");
    }
    Rng rng(derive_seed(seed, "metrics.features"));
    // Gain 3 over fan-in 27 keeps tanh out of its linear range.
    const double stddev = 3.0 / std::sqrt(27.0);
    for (int s = 0; s < kScales; ++s) {
        std::vector<float> w(static_cast<std::size_t>(channels) * 27);
        std::vector<float> b(static_cast<std::size_t>(channels));
        for (auto& v : w) v = static_cast<float>(rng.normal() * stddev);
        for (auto& v : b) v = static_cast<float>(rng.normal() * 0.1);
        weights_.push_back(std::move(w));
        biases_.push_back(std::move(b));
    }
}

std::vector<FeatureMap> RandomConvFeatures::raw_maps(const Image& img) const {
    std::vector<FeatureMap> maps;
    Image level = img;
    for (int s = 0; s < kScales; ++s) {
        if (s > 0) {
            if (level.height < 2 || level.width < 2) {
                break;
            }
            level = downsample2(level);
        }
        FeatureMap fm{level.height, level.width, channels_,
                      std::vector<float>(static_cast<std::size_t>(level.height) * level.width * channels_)};
        const auto& w = weights_[static_cast<std::size_t>(s)];
        const auto& b = biases_[static_cast<std::size_t>(s)];
        float patch[27];
        for (int y = 0; y < level.height; ++y) {
            for (int x = 0; x < level.width; ++x) {
                int k = 0;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = reflect(y + dy, level.height);
                        const int xx = reflect(x + dx, level.width);
                        for (int c = 0; c < 3; ++c) {
                            // Centre the input so flat mid-gray is not a fixed point.
                            patch[k++] = level.at(yy, xx, c) - 0.5f;
                        }
                    }
                }
                float* out = &fm.values[(static_cast<std::size_t>(y) * level.width + x) * channels_];
                for (int oc = 0; oc < channels_; ++oc) {
                    float acc = b[static_cast<std::size_t>(oc)];
                    const float* wr = &w[static_cast<std::size_t>(oc) * 27];
                    for (int i = 0; i < 27; ++i) {
                        acc += wr[i] * patch[i];
                    }
                    out[oc] = std::tanh(acc);
                }
            }
        }
        maps.push_back(std::move(fm));
    }
    return maps;
}

std::vector<FeatureMap> RandomConvFeatures::feature_maps(const Image& img) const {
    auto maps = raw_maps(img);
    for (auto& fm : maps) {
        for (std::size_t p = 0; p < fm.values.size(); p += static_cast<std::size_t>(fm.channels)) {
            double norm = 0.0;
            for (int c = 0; c < fm.channels; ++c) {
                norm += static_cast<double>(fm.values[p + c]) * fm.values[p + c];
            }
            const double inv = 1.0 / (std::sqrt(norm) + 1e-10);
            for (int c = 0; c < fm.channels; ++c) {
                fm.values[p + c] = static_cast<float>(fm.values[p + c] * inv);
            }
        }
    }
    return maps;
}

std::vector<double> RandomConvFeatures::global_features(const Image& img) const {
    const auto maps = raw_maps(img);
    std::vector<double> out;
    // Per-scale channel means.
    for (const auto& fm : maps) {
        const double pixels = static_cast<double>(fm.height) * fm.width;
        for (int c = 0; c < fm.channels; ++c) {
            double sum = 0.0;
            for (std::size_t p = 0; p < fm.values.size(); p += static_cast<std::size_t>(fm.channels)) {
                sum += fm.values[p + c];
            }
            out.push_back(sum / pixels);
        }
    }
    // Coarse spatial layout of the coarsest map, so motion moves the embedding.
    const auto& fm = maps.back();
    for (int gy = 0; gy < kGlobalGrid; ++gy) {
        const int y0 = std::min(gy * fm.height / kGlobalGrid, fm.height - 1);
        const int y1 = std::max((gy + 1) * fm.height / kGlobalGrid, y0 + 1);
        for (int gx = 0; gx < kGlobalGrid; ++gx) {
            const int x0 = std::min(gx * fm.width / kGlobalGrid, fm.width - 1);
            const int x1 = std::max((gx + 1) * fm.width / kGlobalGrid, x0 + 1);
            for (int c = 0; c < fm.channels; ++c) {
                double sum = 0.0;
                for (int y = y0; y < y1; ++y) {
                    for (int x = x0; x < x1; ++x) {
                        sum += fm.values[(static_cast<std::size_t>(y) * fm.width + x) * fm.channels + c];
                    }
                }
                out.push_back(sum / ((y1 - y0) * (x1 - x0)));
            }
        }
    }
    return out;
}

double mse(const Image& a, const Image& b) {
    require_same_shape(a, b, "mse");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
        sum += d * d;
    }
    return a.size() == 0 ? 0.0 : sum / static_cast<double>(a.size());
}

double psnr(const Image& a, const Image& b) {
    const double m = mse(a, b);
    if (m < 1e-10) {
        return kPsnrCap;
    }
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double perceptual_distance(const Image& a, const Image& b, const FeatureExtractor& fx) {
    require_same_shape(a, b, "perceptual_distance");
    const auto fa = fx.feature_maps(a);
    const auto fb = fx.feature_maps(b);
    if (fa.empty() || fa.size() != fb.size()) {
        throw DimensionError("perceptual_distance: feature pyramids differ");
    }
    double total = 0.0;
    for (std::size_t s = 0; s < fa.size(); ++s) {
        double sum = 0.0;
        for (std::size_t i = 0; i < fa[s].values.size(); ++i) {
            const double d = static_cast<double>(fa[s].values[i]) - fb[s].values[i];
            sum += d * d;
        }
        total += sum / (static_cast<double>(fa[s].height) * fa[s].width);
    }
    return total / static_cast<double>(fa.size());
}

std::vector<double> perceptual_distance_map(const Image& a, const Image& b, const FeatureExtractor& fx) {
    require_same_shape(a, b, "perceptual_distance_map");
    const auto fa = fx.feature_maps(a);
    const auto fb = fx.feature_maps(b);
    const auto& ma = fa.front();
    const auto& mb = fb.front();
    std::vector<double> d(static_cast<std::size_t>(ma.height) * ma.width, 0.0);
    for (std::size_t p = 0; p < d.size(); ++p) {
        for (int c = 0; c < ma.channels; ++c) {
            const std::size_t i = p * static_cast<std::size_t>(ma.channels) + static_cast<std::size_t>(c);
            const double diff = static_cast<double>(ma.values[i]) - mb.values[i];
            d[p] += diff * diff;
        }
    }
    return d;
}

namespace {

void fit_gaussian(std::span<const std::vector<double>> set, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) {
    const auto n = static_cast<Eigen::Index>(set.size());
    const auto d = static_cast<Eigen::Index>(set.front().size());
    Eigen::MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(set[static_cast<std::size_t>(i)].size()) != d) {
            throw DimensionError("fid: feature vectors differ in dimension");
        }
        for (Eigen::Index j = 0; j < d; ++j) {
            x(i, j) = set[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
    }
    mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
    cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(std::span<const std::vector<double>> a, std::span<const std::vector<double>> b) {
    if (a.size() < 2 || b.size() < 2) {
        throw DimensionError("fid needs at least 2 feature vectors per set");
    }
    if (a.front().size() != b.front().size()) {
        throw DimensionError("fid: feature sets differ in dimension");
    }
    Eigen::VectorXd mu1, mu2;
    Eigen::MatrixXd s1, s2;
    fit_gaussian(a, mu1, s1);
    fit_gaussian(b, mu2, s2);
    const Eigen::MatrixXd root1 = psd_sqrt(s1);
    const Eigen::MatrixXd inner = root1 * s2 * root1;
    const Eigen::MatrixXd sym = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
    const double tr_cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double value = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_cross;
    return std::max(0.0, value);
}

std::vector<double> luma(const Image& img) {
    std::vector<double> g(static_cast<std::size_t>(img.height) * img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            g[static_cast<std::size_t>(y) * img.width + x] =
                0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
        }
    }
    return g;
}

FlowField estimate_flow(const Image& a, const Image& b, const HornSchunckConfig& cfg) {
    require_same_shape(a, b, "estimate_flow");
    const int h = a.height;
    const int w = a.width;
    const auto g0 = luma(a);
    const auto g1 = luma(b);
    const auto idx = [w](int y, int x) { return static_cast<std::size_t>(y) * w + x; };
    const auto clampi = [](int v, int n) { return std::clamp(v, 0, n - 1); };

    std::vector<double> ix(g0.size()), iy(g0.size()), it(g0.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto avg = [&](int yy, int xx) {
                const auto i = idx(clampi(yy, h), clampi(xx, w));
                return 0.5 * (g0[i] + g1[i]);
            };
            ix[idx(y, x)] = 0.5 * (avg(y, x + 1) - avg(y, x - 1));
            iy[idx(y, x)] = 0.5 * (avg(y + 1, x) - avg(y - 1, x));
            it[idx(y, x)] = g1[idx(y, x)] - g0[idx(y, x)];
        }
    }

    FlowField f{h, w, std::vector<double>(g0.size(), 0.0), std::vector<double>(g0.size(), 0.0)};
    std::vector<double> ubar(g0.size()), vbar(g0.size());
    const auto neighbour_mean = [&](const std::vector<double>& field, int y, int x) {
        const auto at = [&](int yy, int xx) { return field[idx(clampi(yy, h), clampi(xx, w))]; };
        return (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1)) / 6.0 +
               (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1)) / 12.0;
    };
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                ubar[idx(y, x)] = neighbour_mean(f.u, y, x);
                vbar[idx(y, x)] = neighbour_mean(f.v, y, x);
            }
        }
        for (std::size_t i = 0; i < g0.size(); ++i) {
            const double common =
                (ix[i] * ubar[i] + iy[i] * vbar[i] + it[i]) / (cfg.smoothness + ix[i] * ix[i] + iy[i] * iy[i]);
            f.u[i] = ubar[i] - ix[i] * common;
            f.v[i] = vbar[i] - iy[i] * common;
        }
    }
    return f;
}

double flolpips(const Image& prev, const Image& next, const Image& gt_mid, const Image& pred_mid,
                const FeatureExtractor& fx) {
    require_same_shape(prev, next, "flolpips");
    require_same_shape(prev, gt_mid, "flolpips");
    require_same_shape(prev, pred_mid, "flolpips");
    const auto dist = perceptual_distance_map(gt_mid, pred_mid, fx);
    const auto flow_pred = estimate_flow(prev, pred_mid);
    const auto flow_gt = estimate_flow(prev, gt_mid);
    std::vector<double> weight(dist.size());
    double total = 0.0;
    for (std::size_t i = 0; i < weight.size(); ++i) {
        weight[i] = std::hypot(flow_pred.u[i] - flow_gt.u[i], flow_pred.v[i] - flow_gt.v[i]);
        total += weight[i];
    }
    double score = 0.0;
    if (total <= 0.0) {
        for (double d : dist) score += d;
        return score / static_cast<double>(dist.size());
    }
    for (std::size_t i = 0; i < weight.size(); ++i) {
        score += (weight[i] / total) * dist[i];
    }
    return score;
}

double perceptual_straightness_embedded(std::span<const std::vector<double>> x) {
    if (x.size() < 3) {
        throw DimensionError("perceptual straightness needs at least 3 frames");
    }
    double sum = 0.0;
    const std::size_t turns = x.size() - 2;
    for (std::size_t i = 0; i < turns; ++i) {
        const std::size_t dim = x[i].size();
        std::vector<double> d1(dim), d2(dim);
        double n1 = 0.0, n2 = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            d1[k] = x[i + 1][k] - x[i][k];
            d2[k] = x[i + 2][k] - x[i + 1][k];
            n1 += d1[k] * d1[k];
            n2 += d2[k] * d2[k];
        }
        n1 = std::sqrt(n1);
        n2 = std::sqrt(n2);
        double theta = 0.0;
        if (n1 >= 1e-12 && n2 >= 1e-12) {
            // Half-angle form 2 atan2(|a - b|, |a + b|) on unit vectors stays
            // accurate at 0 and 180 degrees, where acos of the cosine does not.
            double diff = 0.0, plus = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double a = d1[k] / n1;
                const double b = d2[k] / n2;
                diff += (a - b) * (a - b);
                plus += (a + b) * (a + b);
            }
            theta = 2.0 * std::atan2(std::sqrt(diff), std::sqrt(plus)) * 180.0 / std::numbers::pi;
        }
        sum += 180.0 - theta;
    }
    return sum / static_cast<double>(turns);
}

double perceptual_straightness(std::span<const Image> frames, const FeatureExtractor& fx) {
    if (frames.size() < 3) {
        throw DimensionError("perceptual straightness needs at least 3 frames");
    }
    std::vector<std::vector<double>> emb;
    for (const auto& f : frames) {
        emb.push_back(fx.global_features(f));
    }
    return perceptual_straightness_embedded(emb);
}

const std::vector<std::string>& all_metric_names() {
    static const std::vector<std::string> names = {"psnr", "lpips", "fid", "flolpips", "ps"};
    return names;
}

std::set<std::string> parse_metric_list(const std::string& csv) {
    std::set<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (std::find(all_metric_names().begin(), all_metric_names().end(), item) == all_metric_names().end()) {
            throw ConfigError("unknown metric '" + item + "' (expected psnr, lpips, fid, flolpips, ps)");
        }
        out.insert(item);
    }
    return out;
}

json report_to_json(const MetricReport& r, const std::set<std::string>& metrics) {
    const auto want = [&](const char* m) { return metrics.empty() || metrics.count(m) != 0; };
    const auto number = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    json j = json::object();
    if (want("psnr")) j["psnr_db"] = number(r.psnr_db);
    if (want("lpips")) j["lpips"] = number(r.lpips);
    if (want("fid")) j["fid"] = number(r.fid);
    if (want("flolpips")) j["flolpips"] = number(r.flolpips);
    if (want("ps")) j["ps"] = number(r.ps);
    j["n_samples"] = r.n_samples;
    j["config"] = r.config;
    return j;
}

void validate_report_json(const json& j) {
    if (!j.is_object()) {
        throw FormatError("metric report must be a JSON object");
    }
    if (!j.contains("n_samples") || !j["n_samples"].is_number_unsigned() || j["n_samples"].get<std::size_t>() < 1) {
        throw FormatError("metric report: n_samples must be an integer >= 1");
    }
    if (!j.contains("config") || !j["config"].is_object()) {
        throw FormatError("metric report: config must be an object");
    }
    bool any = false;
    for (const char* key : {"psnr_db", "lpips", "fid", "flolpips", "ps"}) {
        if (!j.contains(key)) continue;
        any = true;
        if (!j[key].is_number() && !j[key].is_null()) {
            throw FormatError(std::string("metric report: ") + key + " must be a number");
        }
    }
    if (j.contains("psnr_db") && j["psnr_db"].is_number() && j["psnr_db"].get<double>() > kPsnrCap) {
        throw FormatError("metric report: psnr_db exceeds the cap");
    }
    if (!any) {
        throw FormatError("metric report carries no metric");
    }
    for (const auto& [key, value] : j.items()) {
        static const std::set<std::string> known = {"psnr_db", "lpips", "fid", "flolpips", "ps", "n_samples", "config"};
        if (known.count(key) == 0) {
            throw FormatError("metric report: unexpected field '" + key + "'");
        }
    }
}

MetricReport evaluate_dataset(const InterpolateFn& interpolate, std::span<const Triplet> triplets,
                              const FeatureExtractor& fx, const EvalOptions& opts) {
    if (triplets.empty()) {
        throw DimensionError("evaluate_dataset: dataset is empty");
    }
    const auto want = [&](const char* m) { return opts.metrics.empty() || opts.metrics.count(m) != 0; };
    const std::size_t n = triplets.size();
    struct PerSample {
        double psnr = 0, lpips = 0, flolpips = 0, ps = 0;
        std::vector<double> feat_pred, feat_gt;
    };
    std::vector<PerSample> rows(n);
    parallel_for(n, opts.threads, [&](std::size_t i) {
        const auto& t = triplets[i];
        const Image pred = interpolate(t.prev, t.next);
        require_same_shape(pred, t.mid, "evaluate_dataset");
        auto& r = rows[i];
        if (want("psnr")) r.psnr = psnr(pred, t.mid);
        if (want("lpips")) r.lpips = perceptual_distance(pred, t.mid, fx);
        if (want("flolpips")) r.flolpips = flolpips(t.prev, t.next, t.mid, pred, fx);
        if (want("fid") || want("ps")) {
            r.feat_pred = fx.global_features(pred);
        }
        if (want("fid")) r.feat_gt = fx.global_features(t.mid);
        if (want("ps")) {
            const std::vector<std::vector<double>> traj = {fx.global_features(t.prev), r.feat_pred,
                                                           fx.global_features(t.next)};
            r.ps = perceptual_straightness_embedded(traj);
        }
    });

    MetricReport report;
    report.n_samples = n;
    report.config = opts.config;
    for (const auto& r : rows) {
        report.psnr_db += r.psnr;
        report.lpips += r.lpips;
        report.flolpips += r.flolpips;
        report.ps += r.ps;
    }
    const double inv = 1.0 / static_cast<double>(n);
    report.psnr_db *= inv;
    report.lpips *= inv;
    report.flolpips *= inv;
    report.ps *= inv;
    report.fid = std::numeric_limits<double>::quiet_NaN();
    if (want("fid") && n >= 2) {
        std::vector<std::vector<double>> fp, fg;
        for (auto& r : rows) {
            fp.push_back(std::move(r.feat_pred));
            fg.push_back(std::move(r.feat_gt));
        }
        report.fid = fid(fp, fg);
    }
    return report;
}

MetricReport evaluate_dataset(const InterpolateFn& interpolate, const DatasetManifest& manifest,
                              const FeatureExtractor& fx, const EvalOptions& opts) {
    if (manifest.entries.empty()) {
        throw DimensionError("evaluate_dataset: manifest is empty");
    }
    const auto triplets = load_triplets(manifest, opts.threads);
    return evaluate_dataset(interpolate, triplets, fx, opts);
}

}  // namespace e2i
