#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "vdpm/dpm.hpp"
#include "vdpm/geometry.hpp"
#include "vdpm/rng.hpp"
#include "vdpm/tensor.hpp"

namespace vdpm {

struct ModelConfig {
    int patch_size = 8;
    int embed_dim = 64;
    int backbone_depth = 8;
    int heads = 4;
    std::vector<int> tap_layers = {1, 3, 5, 7};
    int decoder_depth = 4;
    enum class Conditioning { kAdaLN, kAddition };
    enum class DecoderKind { kTransformer, kHeadOnly };
    Conditioning conditioning = Conditioning::kAdaLN;
    DecoderKind decoder_kind = DecoderKind::kTransformer;
    int register_tokens = 2;
    int head_hidden_dim = 128;
    int image_size = 32;
    int time_freqs = 16;

    int grid() const { return image_size / patch_size; }
    int patches_per_frame() const { return grid() * grid(); }
    int tokens_per_frame() const { return 1 + register_tokens + patches_per_frame(); }

    void validate() const {
        if (patch_size < 1 || image_size < patch_size || image_size % patch_size != 0)
            throw ConfigError("model: image size must be a positive multiple of patch size");
        if (embed_dim < 2 || heads < 1 || embed_dim % heads != 0)
            throw ConfigError("model: embed dim must be a positive multiple of heads");
        if (backbone_depth < 1) throw ConfigError("model: backbone depth must be >= 1");
        if (tap_layers.size() != 4)
            throw ConfigError("model: exactly 4 tap layers required");
        for (size_t i = 0; i < tap_layers.size(); ++i) {
            if (tap_layers[i] < 0 || tap_layers[i] >= backbone_depth)
                throw ConfigError("model: tap layer out of range");
            if (i > 0 && tap_layers[i] <= tap_layers[i - 1])
                throw ConfigError("model: tap layers must be strictly increasing");
        }
        if (decoder_depth != 2 && decoder_depth != 4)
            throw ConfigError("model: decoder depth must be 2 or 4");
        if (register_tokens < 0) throw ConfigError("model: negative register token count");
        if (head_hidden_dim < 1) throw ConfigError("model: head hidden dim must be >= 1");
        if (time_freqs < 1) throw ConfigError("model: need at least one time frequency");
    }
};

template <typename S>
struct Param {
    Shape shape;
    std::vector<S> data;
};

template <typename S>
using Weights = std::map<std::string, Param<S>>;

// ---------------------------------------------------------------------------
// Weight initialization
// ---------------------------------------------------------------------------

template <typename S>
void add_param(Weights<S>& w, const std::string& name, const Shape& shape, Rng& rng,
               double stddev) {
    Param<S> p;
    p.shape = shape;
    p.data.resize(shape_numel(shape));
    if (stddev > 0.0)
        for (S& v : p.data) v = static_cast<S>(rng.normal(0.0, stddev));
    else
        std::fill(p.data.begin(), p.data.end(), S(0));
    w.emplace(name, std::move(p));
}

template <typename S>
void add_const_param(Weights<S>& w, const std::string& name, const Shape& shape, S value) {
    Param<S> p;
    p.shape = shape;
    p.data.assign(shape_numel(shape), value);
    w.emplace(name, std::move(p));
}

template <typename S>
Weights<S> init_weights(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Weights<S> w;
    const int64_t d = cfg.embed_dim;
    const int64_t ps = cfg.patch_size;
    const double sd = 0.02;

    add_param(w, "patch_embed.w", {ps * ps * 3, d}, rng, sd);
    add_const_param<S>(w, "patch_embed.b", {d}, S(0));
    add_param(w, "pos_embed", {cfg.patches_per_frame(), d}, rng, sd);
    add_param(w, "camera_token", {1, d}, rng, sd);
    add_param(w, "camera_token_ref", {1, d}, rng, sd);
    if (cfg.register_tokens > 0)
        add_param(w, "register_tokens", {cfg.register_tokens, d}, rng, sd);
    add_param(w, "time_embed.w", {2 * cfg.time_freqs, d}, rng, sd);
    add_const_param<S>(w, "time_embed.b", {d}, S(0));

    auto add_ln = [&](const std::string& prefix) {
        add_const_param<S>(w, prefix + ".g", {d}, S(1));
        add_const_param<S>(w, prefix + ".b", {d}, S(0));
    };
    auto add_attn = [&](const std::string& prefix) {
        add_param(w, prefix + ".wq", {d, d}, rng, sd);
        add_const_param<S>(w, prefix + ".bq", {d}, S(0));
        add_param(w, prefix + ".wk", {d, d}, rng, sd);
        add_const_param<S>(w, prefix + ".bk", {d}, S(0));
        add_param(w, prefix + ".wv", {d, d}, rng, sd);
        add_const_param<S>(w, prefix + ".bv", {d}, S(0));
        add_param(w, prefix + ".wo", {d, d}, rng, sd);
        add_const_param<S>(w, prefix + ".bo", {d}, S(0));
    };
    auto add_mlp = [&](const std::string& prefix) {
        add_param(w, prefix + ".w1", {d, 4 * d}, rng, sd);
        add_const_param<S>(w, prefix + ".b1", {4 * d}, S(0));
        add_param(w, prefix + ".w2", {4 * d, d}, rng, sd);
        add_const_param<S>(w, prefix + ".b2", {d}, S(0));
    };

    for (int l = 0; l < cfg.backbone_depth; ++l) {
        const std::string p = "backbone.l" + std::to_string(l);
        add_ln(p + ".ln1");
        add_attn(p + ".attn");
        add_ln(p + ".ln2");
        add_mlp(p + ".mlp");
    }

    if (cfg.decoder_kind == ModelConfig::DecoderKind::kTransformer) {
        for (int b = 0; b < cfg.decoder_depth; ++b) {
            const std::string p = "decoder.b" + std::to_string(b);
            add_attn(p + ".attn");
            add_mlp(p + ".mlp");
            if (cfg.conditioning == ModelConfig::Conditioning::kAdaLN) {
                // (gamma, beta, alpha) per sub-block; zero so every block
                // starts as the identity.
                add_const_param<S>(w, p + ".cond_attn.w", {d, 3 * d}, S(0));
                add_const_param<S>(w, p + ".cond_attn.b", {3 * d}, S(0));
                add_const_param<S>(w, p + ".cond_mlp.w", {d, 3 * d}, S(0));
                add_const_param<S>(w, p + ".cond_mlp.b", {3 * d}, S(0));
            } else {
                add_ln(p + ".ln1");
                add_ln(p + ".ln2");
            }
        }
    }

    const int64_t fused = 4 * d;
    const int64_t hidden = cfg.head_hidden_dim;
    const int64_t patch_out = ps * ps * 4;
    add_param(w, "head.fuse.w", {fused, hidden}, rng, sd);
    add_const_param<S>(w, "head.fuse.b", {hidden}, S(0));
    add_param(w, "head.out.w", {hidden, patch_out}, rng, sd);
    add_const_param<S>(w, "head.out.b", {patch_out}, S(0));

    if (cfg.decoder_kind == ModelConfig::DecoderKind::kHeadOnly) {
        add_param(w, "head2.fuse.w", {fused, hidden}, rng, sd);
        add_const_param<S>(w, "head2.fuse.b", {hidden}, S(0));
        add_param(w, "head2.out.w", {hidden, patch_out}, rng, sd);
        add_const_param<S>(w, "head2.out.b", {patch_out}, S(0));
        add_const_param<S>(w, "head2.cond1.w", {d, 2 * fused}, S(0));
        add_const_param<S>(w, "head2.cond1.b", {2 * fused}, S(0));
        add_const_param<S>(w, "head2.cond2.w", {d, 2 * hidden}, S(0));
        add_const_param<S>(w, "head2.cond2.b", {2 * hidden}, S(0));
    }

    add_param(w, "camera_head.w1", {d, hidden}, rng, sd);
    add_const_param<S>(w, "camera_head.b1", {hidden}, S(0));
    add_param(w, "camera_head.w2", {hidden, 8}, rng, sd);
    {
        // Bias starts at the identity pose with a ~57 degree field of view.
        Param<S> p;
        p.shape = {8};
        p.data.assign(8, S(0));
        p.data[3] = S(1);                      // quaternion w
        p.data[7] = S(std::log(std::exp(1.0) - 1.0)); // softplus(x) = 1
        w.emplace("camera_head.b2", std::move(p));
    }
    return w;
}

template <typename S>
int64_t param_count(const Weights<S>& w) {
    int64_t n = 0;
    for (const auto& [name, p] : w) n += static_cast<int64_t>(p.data.size());
    return n;
}

// ---------------------------------------------------------------------------
// Bound weights: tape leaves for one forward/backward pass
// ---------------------------------------------------------------------------

template <typename S>
struct BoundWeights {
    std::map<std::string, Tensor<S>> leaves;

    Tensor<S> operator[](const std::string& name) const {
        const auto it = leaves.find(name);
        if (it == leaves.end()) throw ContractError("unknown parameter: " + name);
        return it->second;
    }
};

template <typename S>
BoundWeights<S> bind_weights(Tape<S>& tape, const Weights<S>& weights, bool requires_grad) {
    BoundWeights<S> bound;
    for (const auto& [name, p] : weights)
        bound.leaves.emplace(name, tape.input(p.shape, p.data, requires_grad));
    return bound;
}

// ---------------------------------------------------------------------------
// Forward pass pieces
// ---------------------------------------------------------------------------

template <typename S>
struct FramePrediction {
    Tensor<S> points; // [3, H, W]
    Tensor<S> conf;   // [1, H, W], strictly > 1
};

template <typename S>
struct CameraPrediction {
    Tensor<S> translation; // [3]
    Tensor<S> quat_wxyz;   // [4], unit norm
    Tensor<S> fov;         // [1], vertical field of view, > 0
};

template <typename S>
struct ForwardResult {
    std::vector<FramePrediction<S>> time_variant;
    std::vector<FramePrediction<S>> time_invariant; // entry j aliases time_variant[j]
    std::vector<CameraPrediction<S>> cameras;       // relative to the central frame
    Tensor<S> time_token; // conditioning vector actually used by the decoder
    int reference_time_index = 0;
    int reference_camera_index = 0;
};

/// Values of everything the time stream and decoder need, so later reference
/// times can be decoded without re-running the backbone.
template <typename S>
struct BackboneCache {
    bool valid = false;
    int n_frames = 0;
    std::vector<double> timestamps;
    std::vector<std::vector<S>> block_inputs; // backbone_depth buffers [N*T, D]
    std::vector<std::vector<S>> taps;         // 4 buffers [N*T, D]
};

/// Pose supervision is anchored at the central frame of the snippet.
inline int central_frame(int n_frames) { return (n_frames - 1) / 2; }

namespace detail {

template <typename S>
Tensor<S> linear(Tape<S>& tape, Tensor<S> x, Tensor<S> w, Tensor<S> b) {
    return tape.add(tape.matmul(x, w), b);
}

template <typename S>
Tensor<S> layernorm_affine(Tape<S>& tape, Tensor<S> x, Tensor<S> g, Tensor<S> b) {
    return tape.add(tape.mul(tape.layernorm_noaffine(x, S(1e-5)), g), b);
}

template <typename S>
Tensor<S> mlp_block(Tape<S>& tape, const BoundWeights<S>& w, const std::string& prefix,
                    Tensor<S> x) {
    Tensor<S> h = tape.gelu(linear(tape, x, w[prefix + ".w1"], w[prefix + ".b1"]));
    return linear(tape, h, w[prefix + ".w2"], w[prefix + ".b2"]);
}

/// Self-attention of already-normalized tokens, either per frame or global.
template <typename S>
Tensor<S> attend_tokens(Tape<S>& tape, const BoundWeights<S>& w, const std::string& prefix,
                        Tensor<S> u, int heads, bool global, int n_frames,
                        int tokens_per_frame) {
    Tensor<S> q = linear(tape, u, w[prefix + ".wq"], w[prefix + ".bq"]);
    Tensor<S> k = linear(tape, u, w[prefix + ".wk"], w[prefix + ".bk"]);
    Tensor<S> v = linear(tape, u, w[prefix + ".wv"], w[prefix + ".bv"]);
    Tensor<S> ctx;
    if (global || n_frames == 1) {
        ctx = tape.attention(q, k, v, heads);
    } else {
        std::vector<Tensor<S>> per_frame;
        for (int f = 0; f < n_frames; ++f) {
            const int64_t start = static_cast<int64_t>(f) * tokens_per_frame;
            per_frame.push_back(tape.attention(tape.slice(q, 0, start, tokens_per_frame),
                                               tape.slice(k, 0, start, tokens_per_frame),
                                               tape.slice(v, 0, start, tokens_per_frame),
                                               heads));
        }
        ctx = tape.concat(per_frame, 0);
    }
    return linear(tape, ctx, w[prefix + ".wo"], w[prefix + ".bo"]);
}

/// One pre-norm transformer block (attention + MLP) over stream-A tokens.
template <typename S>
Tensor<S> backbone_block(Tape<S>& tape, const BoundWeights<S>& w, const std::string& prefix,
                         Tensor<S> x, int heads, bool global, int n_frames,
                         int tokens_per_frame) {
    Tensor<S> u = layernorm_affine(tape, x, w[prefix + ".ln1.g"], w[prefix + ".ln1.b"]);
    Tensor<S> a = attend_tokens(tape, w, prefix + ".attn", u, heads, global, n_frames,
                                tokens_per_frame);
    Tensor<S> h = tape.add(x, a);
    Tensor<S> u2 = layernorm_affine(tape, h, w[prefix + ".ln2.g"], w[prefix + ".ln2.b"]);
    return tape.add(h, mlp_block(tape, w, prefix + ".mlp", u2));
}

/// Sinusoidal encoding of the target time over the snippet span, projected to
/// the embedding dimension. A single-frame snippet uses span 1.
template <typename S>
Tensor<S> embed_time(Tape<S>& tape, const BoundWeights<S>& w, const ModelConfig& cfg,
                     double t_target, const std::vector<double>& timestamps) {
    double lo = timestamps[0], hi = timestamps[0];
    for (const double t : timestamps) {
        lo = std::min(lo, t);
        hi = std::max(hi, t);
    }
    const double span = (hi > lo) ? (hi - lo) : 1.0;
    const double tau = (t_target - lo) / span;
    std::vector<S> feat(2 * cfg.time_freqs);
    for (int f = 0; f < cfg.time_freqs; ++f) {
        const double angle = tau * M_PI * std::pow(2.0, f);
        feat[2 * f] = static_cast<S>(std::sin(angle));
        feat[2 * f + 1] = static_cast<S>(std::cos(angle));
    }
    Tensor<S> raw = tape.constant({1, 2 * cfg.time_freqs}, std::move(feat));
    return linear(tape, raw, w["time_embed.w"], w["time_embed.b"]);
}

/// The time-token stream: one token per frame, initialized from the target
/// time, reading the (cached or live) stream-A block inputs at every layer
/// through the shared block weights. Stream-A tokens never see these tokens,
/// which is what makes the backbone reusable across target times. Returns the
/// averaged output token [1, D].
template <typename S>
Tensor<S> run_time_stream(Tape<S>& tape, const BoundWeights<S>& w, const ModelConfig& cfg,
                          const std::vector<Tensor<S>>& block_inputs, double t_target,
                          const std::vector<double>& timestamps) {
    const int n = static_cast<int>(timestamps.size());
    const int tpf = cfg.tokens_per_frame();
    Tensor<S> tok0 = embed_time(tape, w, cfg, t_target, timestamps);
    std::vector<Tensor<S>> copies(n, tok0);
    Tensor<S> tau = n == 1 ? tok0 : tape.concat(copies, 0); // [N, D]

    for (int l = 0; l < cfg.backbone_depth; ++l) {
        const std::string p = "backbone.l" + std::to_string(l);
        const bool global = (l % 2) == 1;
        Tensor<S> ux = layernorm_affine(tape, block_inputs[l], w[p + ".ln1.g"], w[p + ".ln1.b"]);
        Tensor<S> ut = layernorm_affine(tape, tau, w[p + ".ln1.g"], w[p + ".ln1.b"]);
        Tensor<S> kx = linear(tape, ux, w[p + ".attn.wk"], w[p + ".attn.bk"]);
        Tensor<S> vx = linear(tape, ux, w[p + ".attn.wv"], w[p + ".attn.bv"]);
        Tensor<S> kt = linear(tape, ut, w[p + ".attn.wk"], w[p + ".attn.bk"]);
        Tensor<S> vt = linear(tape, ut, w[p + ".attn.wv"], w[p + ".attn.bv"]);
        Tensor<S> qt = linear(tape, ut, w[p + ".attn.wq"], w[p + ".attn.bq"]);

        Tensor<S> ctx;
        if (global) {
            Tensor<S> keys = tape.concat({kx, kt}, 0);
            Tensor<S> vals = tape.concat({vx, vt}, 0);
            ctx = tape.attention(qt, keys, vals, cfg.heads);
        } else {
            std::vector<Tensor<S>> rows;
            for (int f = 0; f < n; ++f) {
                Tensor<S> keys = tape.concat({tape.slice(kx, 0, f * tpf, tpf),
                                              tape.slice(kt, 0, f, 1)}, 0);
                Tensor<S> vals = tape.concat({tape.slice(vx, 0, f * tpf, tpf),
                                              tape.slice(vt, 0, f, 1)}, 0);
                rows.push_back(tape.attention(tape.slice(qt, 0, f, 1), keys, vals, cfg.heads));
            }
            ctx = n == 1 ? rows[0] : tape.concat(rows, 0);
        }
        tau = tape.add(tau, linear(tape, ctx, w[p + ".attn.wo"], w[p + ".attn.bo"]));
        Tensor<S> u2 = layernorm_affine(tape, tau, w[p + ".ln2.g"], w[p + ".ln2.b"]);
        tau = tape.add(tau, mlp_block(tape, w, p + ".mlp", u2));
    }
    return tape.mean(tau, 0, true); // [1, D]
}

/// Replaces the token rows of one frame with rows taken from `source`.
template <typename S>
Tensor<S> splice_frame(Tape<S>& tape, Tensor<S> current, Tensor<S> source, int frame,
                       int n_frames, int tokens_per_frame) {
    std::vector<Tensor<S>> parts;
    const int64_t start = static_cast<int64_t>(frame) * tokens_per_frame;
    if (frame > 0) parts.push_back(tape.slice(current, 0, 0, start));
    parts.push_back(tape.slice(source, 0, start, tokens_per_frame));
    if (frame + 1 < n_frames)
        parts.push_back(tape.slice(current, 0, start + tokens_per_frame,
                                   static_cast<int64_t>(n_frames - frame - 1) * tokens_per_frame));
    return parts.size() == 1 ? parts[0] : tape.concat(parts, 0);
}

/// Time-conditioned decoder applied to one tap level. The reference frame's
/// rows are restored after every block: they participate as keys but their
/// features pass through unchanged.
template <typename S>
Tensor<S> run_decoder_level(Tape<S>& tape, const BoundWeights<S>& w, const ModelConfig& cfg,
                            Tensor<S> level_input, Tensor<S> t_hat, int j, int n_frames) {
    const int tpf = cfg.tokens_per_frame();
    const int64_t d = cfg.embed_dim;
    Tensor<S> y = level_input;
    const bool adaln = cfg.conditioning == ModelConfig::Conditioning::kAdaLN;
    if (!adaln) {
        // Addition conditioning: the time token is added to every token once,
        // then plain pre-norm blocks run.
        y = tape.add(y, tape.reshape(t_hat, {d}));
        y = splice_frame(tape, y, level_input, j, n_frames, tpf);
    }
    for (int b = 0; b < cfg.decoder_depth; ++b) {
        const std::string p = "decoder.b" + std::to_string(b);
        const bool global = (b % 2) == 1;
        if (adaln) {
            Tensor<S> mod_a = linear(tape, t_hat, w[p + ".cond_attn.w"], w[p + ".cond_attn.b"]);
            Tensor<S> gamma = tape.reshape(tape.slice(mod_a, 1, 0, d), {d});
            Tensor<S> beta = tape.reshape(tape.slice(mod_a, 1, d, d), {d});
            Tensor<S> alpha = tape.reshape(tape.slice(mod_a, 1, 2 * d, d), {d});
            Tensor<S> u = tape.layernorm_noaffine(y, S(1e-5));
            u = tape.add(tape.add(u, tape.mul(u, gamma)), beta);
            Tensor<S> a = attend_tokens(tape, w, p + ".attn", u, cfg.heads, global, n_frames, tpf);
            y = tape.add(y, tape.mul(a, alpha));

            Tensor<S> mod_m = linear(tape, t_hat, w[p + ".cond_mlp.w"], w[p + ".cond_mlp.b"]);
            Tensor<S> gamma2 = tape.reshape(tape.slice(mod_m, 1, 0, d), {d});
            Tensor<S> beta2 = tape.reshape(tape.slice(mod_m, 1, d, d), {d});
            Tensor<S> alpha2 = tape.reshape(tape.slice(mod_m, 1, 2 * d, d), {d});
            Tensor<S> u2 = tape.layernorm_noaffine(y, S(1e-5));
            u2 = tape.add(tape.add(u2, tape.mul(u2, gamma2)), beta2);
            y = tape.add(y, tape.mul(mlp_block(tape, w, p + ".mlp", u2), alpha2));
        } else {
            y = backbone_block(tape, w, p, y, cfg.heads, global, n_frames, tpf);
        }
        y = splice_frame(tape, y, level_input, j, n_frames, tpf);
    }
    return y;
}

/// Shared point-map head: concatenated tap features of one frame's patch
/// tokens through a two-layer MLP, unfolded to pixels. Channel 3 is raw
/// confidence, mapped to 1 + exp(raw).
template <typename S>
FramePrediction<S> apply_head(Tape<S>& tape, const BoundWeights<S>& w, const ModelConfig& cfg,
                              const std::vector<Tensor<S>>& levels, int frame) {
    const int tpf = cfg.tokens_per_frame();
    const int64_t patch_rows = cfg.patches_per_frame();
    const int64_t patch_off = 1 + cfg.register_tokens;
    std::vector<Tensor<S>> feats;
    for (const Tensor<S>& level : levels)
        feats.push_back(tape.slice(level, 0, static_cast<int64_t>(frame) * tpf + patch_off,
                                   patch_rows));
    Tensor<S> z = tape.concat(feats, 1); // [P, 4D]
    Tensor<S> h = tape.gelu(linear(tape, z, w["head.fuse.w"], w["head.fuse.b"]));
    Tensor<S> o = linear(tape, h, w["head.out.w"], w["head.out.b"]); // [P, ps*ps*4]
    Tensor<S> img = tape.unfold_patches(o, cfg.grid(), cfg.grid(), cfg.patch_size, 4);
    FramePrediction<S> pred;
    pred.points = tape.slice(img, 0, 0, 3);
    pred.conf = tape.add_scalar(tape.exp(tape.slice(img, 0, 3, 1)), S(1));
    return pred;
}

/// Non-shared head used by the head-only variant: the same shape as the
/// shared head but each MLP layer input is normalized and modulated by the
/// time token.
template <typename S>
FramePrediction<S> apply_head2(Tape<S>& tape, const BoundWeights<S>& w, const ModelConfig& cfg,
                               const std::vector<Tensor<S>>& levels, Tensor<S> t_hat,
                               int frame) {
    const int tpf = cfg.tokens_per_frame();
    const int64_t patch_rows = cfg.patches_per_frame();
    const int64_t patch_off = 1 + cfg.register_tokens;
    const int64_t fused = 4 * cfg.embed_dim;
    const int64_t hidden = cfg.head_hidden_dim;
    std::vector<Tensor<S>> feats;
    for (const Tensor<S>& level : levels)
        feats.push_back(tape.slice(level, 0, static_cast<int64_t>(frame) * tpf + patch_off,
                                   patch_rows));
    Tensor<S> z = tape.concat(feats, 1);

    Tensor<S> mod1 = linear(tape, t_hat, w["head2.cond1.w"], w["head2.cond1.b"]);
    Tensor<S> g1 = tape.reshape(tape.slice(mod1, 1, 0, fused), {fused});
    Tensor<S> b1 = tape.reshape(tape.slice(mod1, 1, fused, fused), {fused});
    Tensor<S> u = tape.layernorm_noaffine(z, S(1e-5));
    u = tape.add(tape.add(u, tape.mul(u, g1)), b1);
    Tensor<S> h = tape.gelu(linear(tape, u, w["head2.fuse.w"], w["head2.fuse.b"]));

    Tensor<S> mod2 = linear(tape, t_hat, w["head2.cond2.w"], w["head2.cond2.b"]);
    Tensor<S> g2 = tape.reshape(tape.slice(mod2, 1, 0, hidden), {hidden});
    Tensor<S> b2 = tape.reshape(tape.slice(mod2, 1, hidden, hidden), {hidden});
    Tensor<S> u2 = tape.layernorm_noaffine(h, S(1e-5));
    u2 = tape.add(tape.add(u2, tape.mul(u2, g2)), b2);
    Tensor<S> o = linear(tape, u2, w["head2.out.w"], w["head2.out.b"]);

    Tensor<S> img = tape.unfold_patches(o, cfg.grid(), cfg.grid(), cfg.patch_size, 4);
    FramePrediction<S> pred;
    pred.points = tape.slice(img, 0, 0, 3);
    pred.conf = tape.add_scalar(tape.exp(tape.slice(img, 0, 3, 1)), S(1));
    return pred;
}

template <typename S>
CameraPrediction<S> apply_camera_head(Tape<S>& tape, const BoundWeights<S>& w,
                                      Tensor<S> camera_token) {
    Tensor<S> h = tape.gelu(linear(tape, camera_token, w["camera_head.w1"],
                                   w["camera_head.b1"]));
    Tensor<S> o = linear(tape, h, w["camera_head.w2"], w["camera_head.b2"]); // [1, 8]
    CameraPrediction<S> cam;
    cam.translation = tape.reshape(tape.slice(o, 1, 0, 3), {3});
    Tensor<S> q = tape.slice(o, 1, 3, 4); // [1, 4]
    Tensor<S> sumsq = tape.sum(tape.mul(q, q), 1); // [1]
    Tensor<S> rsqrt = tape.exp(tape.mul_scalar(tape.log(tape.add_scalar(sumsq, S(1e-12))),
                                               S(-0.5)));
    cam.quat_wxyz = tape.reshape(tape.scale_rows(q, rsqrt), {4});
    cam.fov = tape.reshape(tape.softplus(tape.slice(o, 1, 7, 1)), {1});
    return cam;
}

/// Decoded level tokens for all four taps (the identity on the reference
/// frame's rows), or the taps themselves in head-only mode.
template <typename S>
std::vector<Tensor<S>> decode_levels(Tape<S>& tape, const BoundWeights<S>& w,
                                     const ModelConfig& cfg,
                                     const std::vector<Tensor<S>>& taps, Tensor<S> t_hat,
                                     int j, int n_frames) {
    std::vector<Tensor<S>> out;
    for (const Tensor<S>& tap : taps)
        out.push_back(run_decoder_level(tape, w, cfg, tap, t_hat, j, n_frames));
    return out;
}

} // namespace detail

/// Non-overlapping patches of one channel-major [3, H, W] image, flattened in
/// the unfold layout: token (gy, gx), vector index (c*ps + py)*ps + px.
template <typename S>
std::vector<S> extract_patches(const std::vector<float>& image, int image_size, int patch) {
    const int g = image_size / patch;
    const int64_t token_dim = static_cast<int64_t>(patch) * patch * 3;
    std::vector<S> out(static_cast<size_t>(g) * g * token_dim);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            const int64_t tok = static_cast<int64_t>(gy) * g + gx;
            for (int c = 0; c < 3; ++c)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px) {
                        const int64_t src =
                            (static_cast<int64_t>(c) * image_size + gy * patch + py) *
                                image_size + gx * patch + px;
                        out[tok * token_dim + (static_cast<int64_t>(c) * patch + py) * patch +
                            px] = static_cast<S>(image[src]);
                    }
        }
    return out;
}

/// Full forward pass over one snippet's images. Predictions for the
/// time-variant set come straight from the backbone taps; predictions at the
/// reference time come from the time-conditioned decoder. Entry j of the
/// time-invariant set is the same tensor as entry j of the time-variant set.
template <typename S>
ForwardResult<S> full_forward(Tape<S>& tape, const BoundWeights<S>& w, const ModelConfig& cfg,
                              const std::vector<std::vector<float>>& images,
                              const std::vector<double>& timestamps, int j,
                              BackboneCache<S>* cache_out = nullptr) {
    cfg.validate();
    const int n = static_cast<int>(images.size());
    if (n < 1) throw ConfigError("forward: need at least one frame");
    if (static_cast<int>(timestamps.size()) != n)
        throw ShapeError("forward: " + std::to_string(n) + " images vs " +
                         std::to_string(timestamps.size()) + " timestamps");
    if (j < 0 || j >= n) throw ConfigError("forward: reference index out of range");
    const size_t want = static_cast<size_t>(3) * cfg.image_size * cfg.image_size;
    for (const auto& img : images)
        if (img.size() != want)
            throw ShapeError("forward: image buffer has " + std::to_string(img.size()) +
                             " values, config expects " + std::to_string(want));

    const int tpf = cfg.tokens_per_frame();
    const int64_t d = cfg.embed_dim;

    // Tokenization.
    std::vector<Tensor<S>> frame_tokens;
    for (int i = 0; i < n; ++i) {
        Tensor<S> patches = tape.constant(
            {cfg.patches_per_frame(), static_cast<int64_t>(cfg.patch_size) * cfg.patch_size * 3},
            extract_patches<S>(images[i], cfg.image_size, cfg.patch_size));
        Tensor<S> p = detail::linear(tape, patches, w["patch_embed.w"], w["patch_embed.b"]);
        p = tape.add(p, w["pos_embed"]);
        Tensor<S> cam_tok = i == 0 ? w["camera_token_ref"] : w["camera_token"];
        std::vector<Tensor<S>> parts = {cam_tok};
        if (cfg.register_tokens > 0) parts.push_back(w["register_tokens"]);
        parts.push_back(p);
        frame_tokens.push_back(tape.concat(parts, 0)); // [T, D]
    }
    Tensor<S> x = n == 1 ? frame_tokens[0] : tape.concat(frame_tokens, 0); // [N*T, D]

    // Backbone over stream A, recording per-block inputs and tap outputs.
    std::vector<Tensor<S>> block_inputs;
    std::vector<Tensor<S>> taps;
    for (int l = 0; l < cfg.backbone_depth; ++l) {
        block_inputs.push_back(x);
        const bool global = (l % 2) == 1;
        x = detail::backbone_block(tape, w, "backbone.l" + std::to_string(l), x, cfg.heads,
                                   global, n, tpf);
        for (const int tl : cfg.tap_layers)
            if (tl == l) taps.push_back(x);
    }

    // Stream B: the target-time token, averaged over frames.
    Tensor<S> t_hat =
        detail::run_time_stream(tape, w, cfg, block_inputs, timestamps[j], timestamps);

    ForwardResult<S> result;
    result.reference_time_index = j;
    result.reference_camera_index = central_frame(n);
    result.time_token = t_hat;

    for (int i = 0; i < n; ++i)
        result.time_variant.push_back(detail::apply_head(tape, w, cfg, taps, i));

    if (cfg.decoder_kind == ModelConfig::DecoderKind::kTransformer) {
        const std::vector<Tensor<S>> decoded =
            detail::decode_levels(tape, w, cfg, taps, t_hat, j, n);
        for (int i = 0; i < n; ++i) {
            if (i == j)
                result.time_invariant.push_back(result.time_variant[j]);
            else
                result.time_invariant.push_back(detail::apply_head(tape, w, cfg, decoded, i));
        }
    } else {
        for (int i = 0; i < n; ++i) {
            if (i == j)
                result.time_invariant.push_back(result.time_variant[j]);
            else
                result.time_invariant.push_back(detail::apply_head2(tape, w, cfg, taps, t_hat, i));
        }
    }

    for (int i = 0; i < n; ++i) {
        Tensor<S> cam_tok = tape.slice(x, 0, static_cast<int64_t>(i) * tpf, 1);
        result.cameras.push_back(detail::apply_camera_head(tape, w, cam_tok));
    }

    if (cache_out) {
        cache_out->valid = true;
        cache_out->n_frames = n;
        cache_out->timestamps = timestamps;
        cache_out->block_inputs.clear();
        for (const Tensor<S>& bi : block_inputs) cache_out->block_inputs.push_back(bi.value());
        cache_out->taps.clear();
        for (const Tensor<S>& t : taps) cache_out->taps.push_back(t.value());
    }
    return result;
}

/// Re-decodes the time-invariant set at a new reference index from cached
/// backbone values. Exactly the arithmetic of full_forward past the taps, so
/// results are bit-identical to a fresh pass.
template <typename S>
std::vector<FramePrediction<S>> decode_at_time(Tape<S>& tape, const BoundWeights<S>& w,
                                               const ModelConfig& cfg,
                                               const BackboneCache<S>& cache, int j) {
    if (!cache.valid)
        throw ContractError("decode_at_time: no cached backbone pass for this snippet");
    const int n = cache.n_frames;
    if (j < 0 || j >= n) throw ConfigError("decode_at_time: reference index out of range");
    const int tpf = cfg.tokens_per_frame();
    const Shape tok_shape = {static_cast<int64_t>(n) * tpf, cfg.embed_dim};

    std::vector<Tensor<S>> block_inputs;
    for (const auto& buf : cache.block_inputs)
        block_inputs.push_back(tape.constant(tok_shape, buf));
    std::vector<Tensor<S>> taps;
    for (const auto& buf : cache.taps) taps.push_back(tape.constant(tok_shape, buf));

    Tensor<S> t_hat = detail::run_time_stream(tape, w, cfg, block_inputs,
                                              cache.timestamps[j], cache.timestamps);
    std::vector<FramePrediction<S>> out;
    if (cfg.decoder_kind == ModelConfig::DecoderKind::kTransformer) {
        const std::vector<Tensor<S>> decoded =
            detail::decode_levels(tape, w, cfg, taps, t_hat, j, n);
        for (int i = 0; i < n; ++i) {
            if (i == j)
                out.push_back(detail::apply_head(tape, w, cfg, taps, i));
            else
                out.push_back(detail::apply_head(tape, w, cfg, decoded, i));
        }
    } else {
        for (int i = 0; i < n; ++i) {
            if (i == j)
                out.push_back(detail::apply_head(tape, w, cfg, taps, i));
            else
                out.push_back(detail::apply_head2(tape, w, cfg, taps, t_hat, i));
        }
    }
    return out;
}

/// Reads a prediction out of the tape into a dense point map (all pixels
/// carry values; downstream scoring masks by ground-truth validity).
template <typename S>
PointMap prediction_to_pointmap(const FramePrediction<S>& pred, int source_frame,
                                int time_index) {
    const Shape& shape = pred.points.shape();
    const int h = static_cast<int>(shape[1]);
    const int wd = static_cast<int>(shape[2]);
    PointMap map(h, wd, source_frame, time_index, 0);
    const std::vector<S>& pv = pred.points.value();
    const std::vector<S>& cv = pred.conf.value();
    const size_t plane = static_cast<size_t>(h) * wd;
    for (size_t px = 0; px < plane; ++px) {
        map.points[px] = Eigen::Vector3d(pv[px], pv[plane + px], pv[2 * plane + px]);
        map.confidence[px] = static_cast<double>(cv[px]);
        map.valid[px] = 1;
    }
    return map;
}

/// Reads a camera prediction into a rigid pose (relative to the reference
/// camera frame) plus the predicted vertical field of view.
template <typename S>
std::pair<Rigid, double> prediction_to_camera(const CameraPrediction<S>& cam) {
    const std::vector<S>& t = cam.translation.value();
    const std::vector<S>& q = cam.quat_wxyz.value();
    const Rigid pose(Eigen::Quaterniond(q[0], q[1], q[2], q[3]),
                     Eigen::Vector3d(t[0], t[1], t[2]));
    return {pose, static_cast<double>(cam.fov.value()[0])};
}

} // namespace vdpm
