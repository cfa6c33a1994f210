#include "e2i/backbone.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace e2i {

void BackboneConfig::validate() const {
    std::ostringstream msg;
    if (d_model < 2 || d_model % 2 != 0) {
        msg << "d_model must be a positive even number, got " << d_model;
    } else if (n_heads < 1 || d_model % n_heads != 0) {
        msg << "d_model " << d_model << " is not divisible by n_heads " << n_heads;
    } else if (n_blocks < 0 || mlp_ratio < 1 || semantic_tokens < 0) {
        msg << "n_blocks, mlp_ratio and semantic_tokens must be non-negative (mlp_ratio >= 1)";
    } else if (token_patch < 1 || latent_height % token_patch != 0 || latent_width % token_patch != 0) {
        msg << "latent grid " << latent_height << "x" << latent_width
            << " is not divisible by token_patch " << token_patch;
    } else if (latent_channels < 1 || latent_height < 1 || latent_width < 1) {
        msg << "latent geometry must be positive";
    } else {
        return;
    }
    throw ConfigError(msg.str());
}

template <typename T>
void NamedTensors<T>::add(const std::string& name, Mat<T> value) {
    if (contains(name)) {
        throw ConfigError("duplicate tensor name '" + name + "'");
    }
    index_.emplace(name, names_.size());
    names_.push_back(name);
    tensors_.push_back(std::move(value));
}

template <typename T>
Mat<T>& NamedTensors<T>::at(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) {
        throw ConfigError("unknown tensor '" + name + "'");
    }
    return tensors_[it->second];
}

template <typename T>
const Mat<T>& NamedTensors<T>::at(const std::string& name) const {
    return const_cast<NamedTensors<T>*>(this)->at(name);
}

template <typename T>
std::size_t NamedTensors<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) {
        n += static_cast<std::size_t>(t.size());
    }
    return n;
}

template <typename T>
Mat<T>& NamedTensors<T>::zeros_like_slot(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (!contains(name)) {
        add(name, Mat<T>::Zero(rows, cols));
    }
    return at(name);
}

template class NamedTensors<float>;
template class NamedTensors<double>;

namespace {

std::string block_name(int i, const char* leaf) {
    return "block" + std::to_string(i) + "." + leaf;
}

Mat<float> gaussian(Rng& rng, int rows, int cols, double stddev) {
    Mat<float> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<float>(rng.normal() * stddev);
    }
    return m;
}

// Fixed 2-D sin/cos table used to initialize the learned positional rows.
Mat<float> sincos_positions(int rows, int cols, int d) {
    Mat<float> pos(rows * cols, d);
    const int quarter = d / 4;
    for (int y = 0; y < rows; ++y) {
        for (int x = 0; x < cols; ++x) {
            const int r = y * cols + x;
            int k = 0;
            for (const int coord : {y, x}) {
                for (int f = 0; f < quarter; ++f) {
                    const double omega = std::pow(10000.0, -static_cast<double>(f) / quarter);
                    pos(r, k + f) = static_cast<float>(std::sin(coord * omega));
                    pos(r, k + quarter + f) = static_cast<float>(std::cos(coord * omega));
                }
                k += 2 * quarter;
            }
            for (; k < d; ++k) {
                pos(r, k) = 0.0f;
            }
        }
    }
    return pos;
}

void add_linear(NamedTensors<float>& t, Rng& rng, const std::string& name, int out, int in) {
    t.add(name, gaussian(rng, out, in, 1.0 / std::sqrt(static_cast<double>(in))));
    t.add(name + ".bias", Mat<float>::Zero(1, out));
}

}  // namespace

BackboneParams<float> init_backbone(const BackboneConfig& cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.init_seed, "backbone.init"));
    BackboneParams<float> p{cfg, {}};
    auto& t = p.tensors;
    const int d = cfg.d_model;
    add_linear(t, rng, "embed.noisy", d, cfg.token_dim());
    add_linear(t, rng, "embed.cond", d, cfg.token_dim());
    add_linear(t, rng, "embed.semantic", d, d);
    t.add("embed.role", gaussian(rng, 3, d, 0.5));
    t.add("embed.pos", sincos_positions(cfg.latent_height / cfg.token_patch,
                                        cfg.latent_width / cfg.token_patch, d));
    t.add("embed.semantic_pos", gaussian(rng, cfg.semantic_tokens, d, 0.5));
    const int hidden = d * cfg.mlp_ratio;
    for (int b = 0; b < cfg.n_blocks; ++b) {
        add_linear(t, rng, block_name(b, "attn.q"), d, d);
        add_linear(t, rng, block_name(b, "attn.k"), d, d);
        add_linear(t, rng, block_name(b, "attn.v"), d, d);
        add_linear(t, rng, block_name(b, "attn.out"), d, d);
        add_linear(t, rng, block_name(b, "mlp.fc1"), hidden, d);
        add_linear(t, rng, block_name(b, "mlp.fc2"), d, hidden);
        add_linear(t, rng, block_name(b, "mod.fc1"), d, d);
        t.add(block_name(b, "mod.fc2"), Mat<float>::Zero(6 * d, d));
        t.add(block_name(b, "mod.fc2.bias"), Mat<float>::Zero(1, 6 * d));
    }
    add_linear(t, rng, "head", cfg.token_dim(), d);
    return p;
}

std::uint32_t weights_checksum(const NamedTensors<float>& tensors) {
    Crc32 crc;
    for (const auto& name : tensors.names()) {
        const auto& m = tensors.at(name);
        crc.update_str(name);
        crc.update_u32(static_cast<std::uint32_t>(m.rows()));
        crc.update_u32(static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            crc.update_f32(m.data()[i]);
        }
    }
    return crc.value();
}

std::vector<std::string> linear_weight_names(const BackboneParams<float>& params) {
    std::vector<std::string> out;
    for (const auto& name : params.tensors.names()) {
        if (params.tensors.contains(name + ".bias")) {
            out.push_back(name);
        }
    }
    return out;
}

double timestep_max_frequency(int /*d_model*/) { return 1000.0; }

std::vector<double> timestep_embedding(double t, int d_model) {
    const int half = d_model / 2;
    std::vector<double> e(static_cast<std::size_t>(2 * half), 0.0);
    for (int i = 0; i < half; ++i) {
        const double freq =
            timestep_max_frequency(d_model) * std::exp(-std::log(10000.0) * i / half);
        e[static_cast<std::size_t>(i)] = std::sin(freq * t);
        e[static_cast<std::size_t>(half + i)] = std::cos(freq * t);
    }
    return e;
}

Mat<float> tokenize(const Latent& z, const BackboneConfig& cfg) {
    if (z.channels != cfg.latent_channels || z.height != cfg.latent_height || z.width != cfg.latent_width) {
        std::ostringstream msg;
        msg << "latent " << z.channels << "x" << z.height << "x" << z.width << " does not match backbone grid "
            << cfg.latent_channels << "x" << cfg.latent_height << "x" << cfg.latent_width;
        throw DimensionError(msg.str());
    }
    const int p = cfg.token_patch;
    const int tw = z.width / p;
    Mat<float> tokens(cfg.tokens_per_latent(), cfg.token_dim());
    for (int ty = 0; ty < z.height / p; ++ty) {
        for (int tx = 0; tx < tw; ++tx) {
            for (int c = 0; c < z.channels; ++c) {
                for (int dy = 0; dy < p; ++dy) {
                    for (int dx = 0; dx < p; ++dx) {
                        tokens(ty * tw + tx, (c * p + dy) * p + dx) = z.at(c, ty * p + dy, tx * p + dx);
                    }
                }
            }
        }
    }
    return tokens;
}

Latent untokenize(const Mat<float>& tokens, const BackboneConfig& cfg) {
    if (tokens.rows() != cfg.tokens_per_latent() || tokens.cols() != cfg.token_dim()) {
        throw DimensionError("token matrix does not match backbone grid");
    }
    const int p = cfg.token_patch;
    Latent z(cfg.latent_channels, cfg.latent_height, cfg.latent_width);
    const int tw = z.width / p;
    for (int ty = 0; ty < z.height / p; ++ty) {
        for (int tx = 0; tx < tw; ++tx) {
            for (int c = 0; c < z.channels; ++c) {
                for (int dy = 0; dy < p; ++dy) {
                    for (int dx = 0; dx < p; ++dx) {
                        z.at(c, ty * p + dy, tx * p + dx) = tokens(ty * tw + tx, (c * p + dy) * p + dx);
                    }
                }
            }
        }
    }
    return z;
}

BackboneInput<float> make_input(const BackboneConfig& cfg, const Latent& z_t, double t,
                                const ConditioningSet& c) {
    if (!z_t.same_shape(c.z0) || !z_t.same_shape(c.z1)) {
        throw DimensionError("noisy latent and conditioning latents differ in shape");
    }
    if (c.h.tokens.rows() != cfg.semantic_tokens || c.h.tokens.cols() != cfg.d_model) {
        std::ostringstream msg;
        msg << "semantic tokens are " << c.h.tokens.rows() << "x" << c.h.tokens.cols() << ", backbone expects "
            << cfg.semantic_tokens << "x" << cfg.d_model;
        throw DimensionError(msg.str());
    }
    if (!(t >= 0.0 && t <= 1.0)) {
        throw DimensionError("timestep must lie in [0, 1]");
    }
    return {tokenize(z_t, cfg), tokenize(c.z0, cfg), tokenize(c.z1, cfg), c.h.tokens, t};
}

namespace {

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

constexpr double kLnEps = 1e-6;

template <typename T>
const LoraAdapter<T>* find_adapter(const AdapterMap<T>* adapters, const std::string& name) {
    if (adapters == nullptr) {
        return nullptr;
    }
    const auto it = adapters->find(name);
    return it == adapters->end() ? nullptr : &it->second;
}

template <typename T>
Mat<T> linear_forward(const BackboneParams<T>& p, const AdapterMap<T>* adapters, const std::string& name,
                      const Mat<T>& x, LinearCache<T>* cache) {
    const Mat<T>& w = p.tensors.at(name);
    Mat<T> y = x * w.transpose();
    y.rowwise() += p.tensors.at(name + ".bias").row(0);
    if (const auto* ad = find_adapter(adapters, name)) {
        Mat<T> u = x * ad->a.transpose();
        y.noalias() += ad->scale * (u * ad->b.transpose());
        if (cache != nullptr) {
            cache->lora_hidden = std::move(u);
        }
    }
    if (cache != nullptr) {
        cache->input = x;
    }
    return y;
}

template <typename T>
Mat<T> linear_backward(const BackboneParams<T>& p, const AdapterMap<T>* adapters, const std::string& name,
                       const LinearCache<T>& cache, const Mat<T>& dy, NamedTensors<T>* base_grads,
                       AdapterMap<T>* adapter_grads) {
    const Mat<T>& w = p.tensors.at(name);
    Mat<T> dx = dy * w;
    if (base_grads != nullptr) {
        base_grads->zeros_like_slot(name, w.rows(), w.cols()).noalias() += dy.transpose() * cache.input;
        base_grads->zeros_like_slot(name + ".bias", 1, w.rows()) += dy.colwise().sum();
    }
    if (const auto* ad = find_adapter(adapters, name)) {
        const Mat<T> dyb = dy * ad->b;
        dx.noalias() += ad->scale * (dyb * ad->a);
        if (adapter_grads != nullptr) {
            auto& g = (*adapter_grads)[name];
            if (g.a.size() == 0) {
                g.a = Mat<T>::Zero(ad->a.rows(), ad->a.cols());
                g.b = Mat<T>::Zero(ad->b.rows(), ad->b.cols());
                g.scale = ad->scale;
            }
            g.b.noalias() += ad->scale * (dy.transpose() * cache.lora_hidden);
            g.a.noalias() += ad->scale * (dyb.transpose() * cache.input);
        }
    }
    return dx;
}

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, Mat<T>& xhat, ColVec<T>& rstd) {
    const ColVec<T> mean = x.rowwise().mean();
    xhat = x.colwise() - mean;
    const ColVec<T> var = xhat.array().square().rowwise().mean();
    rstd = (var.array() + static_cast<T>(kLnEps)).rsqrt();
    xhat = xhat.array().colwise() * rstd.array();
    return xhat;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dxhat, const Mat<T>& xhat, const ColVec<T>& rstd) {
    const ColVec<T> mean_d = dxhat.rowwise().mean();
    const ColVec<T> mean_dx = (dxhat.array() * xhat.array()).rowwise().mean();
    Mat<T> dx = dxhat.colwise() - mean_d;
    dx.array() -= xhat.array().colwise() * mean_dx.array();
    dx.array().colwise() *= rstd.array();
    return dx;
}

template <typename T>
T silu(T x) {
    return x / (T(1) + std::exp(-x));
}

template <typename T>
T silu_grad(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

template <typename T>
T gelu(T x) {
    const T inner = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluK) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
T gelu_grad(T x) {
    const T inner = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluK) * x * x * x);
    const T th = std::tanh(inner);
    const T dinner = static_cast<T>(kGeluC) * (T(1) + T(3) * static_cast<T>(kGeluK) * x * x);
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * dinner;
}

// Row-wise loops keep the exp vectorized on row-major storage.
template <typename T>
void softmax_rows(Mat<T>& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const T m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
    }
}

// One modulated transformer block, in place on x.
template <typename T>
void block_forward(const BackboneParams<T>& p, const AdapterMap<T>* adapters, int b, const Mat<T>& temb,
                   Mat<T>& x, BlockCache<T>* cache) {
    const int d = p.config.d_model;
    const int heads = p.config.n_heads;
    const int dh = p.config.head_dim();
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    auto c = [&](auto member) { return cache != nullptr ? &(cache->*member) : nullptr; };

    Mat<T> mod_pre = linear_forward(p, adapters, block_name(b, "mod.fc1"), temb, c(&BlockCache<T>::mod_fc1));
    const Mat<T> mod_act = mod_pre.unaryExpr([](T v) { return silu(v); });
    const Mat<T> mod = linear_forward(p, adapters, block_name(b, "mod.fc2"), mod_act, c(&BlockCache<T>::mod_fc2));
    const auto shift1 = mod.row(0).segment(0, d);
    const RowVec<T> scale1 = mod.row(0).segment(d, d).array() + T(1);
    const RowVec<T> gate1 = mod.row(0).segment(2 * d, d).array() + T(1);
    const auto shift2 = mod.row(0).segment(3 * d, d);
    const RowVec<T> scale2 = mod.row(0).segment(4 * d, d).array() + T(1);
    const RowVec<T> gate2 = mod.row(0).segment(5 * d, d).array() + T(1);

    Mat<T> xhat1;
    ColVec<T> rstd1;
    layer_norm(x, xhat1, rstd1);
    Mat<T> h1 = xhat1.array().rowwise() * scale1.array();
    h1.rowwise() += shift1;

    const Mat<T> q = linear_forward(p, adapters, block_name(b, "attn.q"), h1, c(&BlockCache<T>::q));
    const Mat<T> k = linear_forward(p, adapters, block_name(b, "attn.k"), h1, c(&BlockCache<T>::k));
    const Mat<T> v = linear_forward(p, adapters, block_name(b, "attn.v"), h1, c(&BlockCache<T>::v));
    Mat<T> o(x.rows(), d);
    if (cache != nullptr) {
        cache->probs.resize(static_cast<std::size_t>(heads));
    }
    const Mat<T> q_scaled = q * inv_sqrt;
    Mat<T> scores;
    for (int hd = 0; hd < heads; ++hd) {
        scores.noalias() = q_scaled.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose();
        softmax_rows(scores);
        o.middleCols(hd * dh, dh).noalias() = scores * v.middleCols(hd * dh, dh);
        if (cache != nullptr) {
            cache->probs[static_cast<std::size_t>(hd)] = scores;
        }
    }
    const Mat<T> attn = linear_forward(p, adapters, block_name(b, "attn.out"), o, c(&BlockCache<T>::out));
    x.array() += attn.array().rowwise() * gate1.array();

    Mat<T> xhat2;
    ColVec<T> rstd2;
    layer_norm(x, xhat2, rstd2);
    Mat<T> h2 = xhat2.array().rowwise() * scale2.array();
    h2.rowwise() += shift2;
    const Mat<T> mlp_pre = linear_forward(p, adapters, block_name(b, "mlp.fc1"), h2, c(&BlockCache<T>::fc1));
    const Mat<T> mlp_act = mlp_pre.unaryExpr([](T v) { return gelu(v); });
    const Mat<T> mlp = linear_forward(p, adapters, block_name(b, "mlp.fc2"), mlp_act, c(&BlockCache<T>::fc2));
    x.array() += mlp.array().rowwise() * gate2.array();

    if (cache != nullptr) {
        cache->mod_pre = std::move(mod_pre);
        cache->modulation = mod;
        cache->xhat1 = std::move(xhat1);
        cache->rstd1 = std::move(rstd1);
        cache->qm = q;
        cache->km = k;
        cache->vm = v;
        cache->attn = attn;
        cache->xhat2 = std::move(xhat2);
        cache->rstd2 = std::move(rstd2);
        cache->mlp_pre = mlp_pre;
        cache->mlp = mlp;
    }
}

// Returns d(loss)/d(block input) given d(loss)/d(block output).
template <typename T>
Mat<T> block_backward(const BackboneParams<T>& p, const AdapterMap<T>* adapters, int b,
                      const BlockCache<T>& c, const Mat<T>& dx_out, NamedTensors<T>* bg, AdapterMap<T>* ag) {
    const int d = p.config.d_model;
    const int heads = p.config.n_heads;
    const int dh = p.config.head_dim();
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    const auto mod = c.modulation.row(0);
    const RowVec<T> scale1 = mod.segment(d, d).array() + T(1);
    const RowVec<T> gate1 = mod.segment(2 * d, d).array() + T(1);
    const RowVec<T> scale2 = mod.segment(4 * d, d).array() + T(1);
    const RowVec<T> gate2 = mod.segment(5 * d, d).array() + T(1);
    Mat<T> dmod = Mat<T>::Zero(1, 6 * d);

    // MLP sub-layer.
    const Mat<T> dm = dx_out.array().rowwise() * gate2.array();
    dmod.row(0).segment(5 * d, d) = (dx_out.array() * c.mlp.array()).colwise().sum();
    Mat<T> dact = linear_backward(p, adapters, block_name(b, "mlp.fc2"), c.fc2, dm, bg, ag);
    dact.array() *= c.mlp_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    const Mat<T> dh2 = linear_backward(p, adapters, block_name(b, "mlp.fc1"), c.fc1, dact, bg, ag);
    dmod.row(0).segment(3 * d, d) = dh2.colwise().sum();
    dmod.row(0).segment(4 * d, d) = (dh2.array() * c.xhat2.array()).colwise().sum();
    const Mat<T> dxhat2 = dh2.array().rowwise() * scale2.array();
    Mat<T> dx_mid = dx_out + layer_norm_backward(dxhat2, c.xhat2, c.rstd2);

    // Attention sub-layer.
    const Mat<T> da = dx_mid.array().rowwise() * gate1.array();
    dmod.row(0).segment(2 * d, d) = (dx_mid.array() * c.attn.array()).colwise().sum();
    const Mat<T> dout = linear_backward(p, adapters, block_name(b, "attn.out"), c.out, da, bg, ag);
    Mat<T> dq(dout.rows(), d), dk(dout.rows(), d), dv(dout.rows(), d);
    Mat<T> dprob;
    for (int hd = 0; hd < heads; ++hd) {
        const Mat<T>& prob = c.probs[static_cast<std::size_t>(hd)];
        const auto dout_h = dout.middleCols(hd * dh, dh);
        dprob.noalias() = dout_h * c.vm.middleCols(hd * dh, dh).transpose();
        dv.middleCols(hd * dh, dh).noalias() = prob.transpose() * dout_h;
        for (Eigen::Index r = 0; r < dprob.rows(); ++r) {
            const T dot = dprob.row(r).dot(prob.row(r));
            dprob.row(r) = (dprob.row(r).array() - dot) * prob.row(r).array();
        }
        dprob *= inv_sqrt;
        dq.middleCols(hd * dh, dh).noalias() = dprob * c.km.middleCols(hd * dh, dh);
        dk.middleCols(hd * dh, dh).noalias() = dprob.transpose() * c.qm.middleCols(hd * dh, dh);
    }
    Mat<T> dh1 = linear_backward(p, adapters, block_name(b, "attn.q"), c.q, dq, bg, ag);
    dh1 += linear_backward(p, adapters, block_name(b, "attn.k"), c.k, dk, bg, ag);
    dh1 += linear_backward(p, adapters, block_name(b, "attn.v"), c.v, dv, bg, ag);
    dmod.row(0).segment(0, d) = dh1.colwise().sum();
    dmod.row(0).segment(d, d) = (dh1.array() * c.xhat1.array()).colwise().sum();
    const Mat<T> dxhat1 = dh1.array().rowwise() * scale1.array();
    Mat<T> dx_in = dx_mid + layer_norm_backward(dxhat1, c.xhat1, c.rstd1);

    // Modulation MLP.
    Mat<T> dmod_act = linear_backward(p, adapters, block_name(b, "mod.fc2"), c.mod_fc2, dmod, bg, ag);
    dmod_act.array() *= c.mod_pre.unaryExpr([](T v) { return silu_grad(v); }).array();
    linear_backward(p, adapters, block_name(b, "mod.fc1"), c.mod_fc1, dmod_act, bg, ag);
    return dx_in;
}

}  // namespace

template <typename T>
Mat<T> forward_tokens(const BackboneParams<T>& p, const AdapterMap<T>* adapters, const BackboneInput<T>& in,
                      ForwardCache<T>* cache) {
    const auto& cfg = p.config;
    const int n = cfg.tokens_per_latent();
    const int ks = cfg.semantic_tokens;
    const int d = cfg.d_model;
    if (in.noisy.rows() != n || in.z0.rows() != n || in.z1.rows() != n || in.noisy.cols() != cfg.token_dim() ||
        in.z0.cols() != cfg.token_dim() || in.z1.cols() != cfg.token_dim() || in.semantic.rows() != ks ||
        in.semantic.cols() != d) {
        throw DimensionError("backbone input tokens do not match the configured geometry");
    }
    const bool keep = cache != nullptr;

    Mat<T> x(cfg.sequence_length(), d);
    const Mat<T>& role = p.tensors.at("embed.role");
    const Mat<T>& pos = p.tensors.at("embed.pos");
    x.topRows(n) = linear_forward(p, adapters, "embed.noisy", in.noisy, static_cast<LinearCache<T>*>(nullptr));
    x.middleRows(n, n) = linear_forward(p, adapters, "embed.cond", in.z0, static_cast<LinearCache<T>*>(nullptr));
    x.middleRows(2 * n, n) = linear_forward(p, adapters, "embed.cond", in.z1, static_cast<LinearCache<T>*>(nullptr));
    for (int g = 0; g < 3; ++g) {
        x.middleRows(g * n, n) += pos;
        x.middleRows(g * n, n).rowwise() += role.row(g);
    }
    if (ks > 0) {
        x.bottomRows(ks) = linear_forward(p, adapters, "embed.semantic", in.semantic, static_cast<LinearCache<T>*>(nullptr));
        x.bottomRows(ks) += p.tensors.at("embed.semantic_pos");
    }

    const auto e = timestep_embedding(in.t, d);
    Mat<T> temb(1, d);
    for (int i = 0; i < d; ++i) {
        temb(0, i) = static_cast<T>(e[static_cast<std::size_t>(i)]);
    }

    if (keep) {
        cache->blocks.assign(static_cast<std::size_t>(cfg.n_blocks), {});
    }
    for (int b = 0; b < cfg.n_blocks; ++b) {
        block_forward(p, adapters, b, temb, x, keep ? &cache->blocks[static_cast<std::size_t>(b)] : nullptr);
    }

    Mat<T> xhat;
    ColVec<T> rstd;
    layer_norm(Mat<T>(x.topRows(n)), xhat, rstd);
    Mat<T> out = linear_forward(p, adapters, "head", xhat, keep ? &cache->head : nullptr);

    if (keep) {
        cache->input = in;
        cache->temb = temb;
        cache->xhat_final = std::move(xhat);
        cache->rstd_final = std::move(rstd);
    }
    return out;
}

template <typename T>
void backward_tokens(const BackboneParams<T>& p, const AdapterMap<T>* adapters, const ForwardCache<T>& cache,
                     const Mat<T>& d_out, NamedTensors<T>* bg, AdapterMap<T>* ag) {
    const auto& cfg = p.config;
    const int n = cfg.tokens_per_latent();
    const int ks = cfg.semantic_tokens;
    const int d = cfg.d_model;
    if (d_out.rows() != n || d_out.cols() != cfg.token_dim()) {
        throw DimensionError("output gradient does not match the noisy token grid");
    }

    Mat<T> dx = Mat<T>::Zero(cfg.sequence_length(), d);
    const Mat<T> dxhat = linear_backward(p, adapters, "head", cache.head, d_out, bg, ag);
    dx.topRows(n) = layer_norm_backward(dxhat, cache.xhat_final, cache.rstd_final);

    for (int b = cfg.n_blocks - 1; b >= 0; --b) {
        dx = block_backward(p, adapters, b, cache.blocks[static_cast<std::size_t>(b)], dx, bg, ag);
    }

    const auto embed_backward = [&](const char* name, const Mat<T>& input, const Mat<T>& dy) {
        LinearCache<T> lc;
        lc.input = input;
        if (const auto* ad = find_adapter(adapters, name)) {
            lc.lora_hidden = input * ad->a.transpose();
        }
        linear_backward(p, adapters, name, lc, dy, bg, ag);
    };
    embed_backward("embed.noisy", cache.input.noisy, dx.topRows(n));
    embed_backward("embed.cond", cache.input.z0, dx.middleRows(n, n));
    embed_backward("embed.cond", cache.input.z1, dx.middleRows(2 * n, n));
    if (ks > 0) {
        embed_backward("embed.semantic", cache.input.semantic, dx.bottomRows(ks));
    }
    if (bg != nullptr) {
        auto& role = bg->zeros_like_slot("embed.role", 3, d);
        auto& pos = bg->zeros_like_slot("embed.pos", n, d);
        for (int g = 0; g < 3; ++g) {
            role.row(g) += dx.middleRows(g * n, n).colwise().sum();
            pos += dx.middleRows(g * n, n);
        }
        if (ks > 0) {
            bg->zeros_like_slot("embed.semantic_pos", ks, d) += dx.bottomRows(ks);
        }
    }
}

template Mat<float> forward_tokens(const BackboneParams<float>&, const AdapterMap<float>*,
                                   const BackboneInput<float>&, ForwardCache<float>*);
template Mat<double> forward_tokens(const BackboneParams<double>&, const AdapterMap<double>*,
                                    const BackboneInput<double>&, ForwardCache<double>*);
template void backward_tokens(const BackboneParams<float>&, const AdapterMap<float>*, const ForwardCache<float>&,
                              const Mat<float>&, NamedTensors<float>*, AdapterMap<float>*);
template void backward_tokens(const BackboneParams<double>&, const AdapterMap<double>*,
                              const ForwardCache<double>&, const Mat<double>&, NamedTensors<double>*,
                              AdapterMap<double>*);

Latent forward(const BackboneParams<float>& params, const Latent& z_t, double t, const ConditioningSet& c,
               const AdapterMap<float>* adapters) {
    const auto input = make_input(params.config, z_t, t, c);
    return untokenize(forward_tokens(params, adapters, input), params.config);
}

}  // namespace e2i
