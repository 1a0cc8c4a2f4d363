#pragma once

// The conditioned diffusion transformer.
//
// Per frame, the noise, source and driving token streams are concatenated
// into one 3*T_f sequence and processed by joint multi-head self-attention
// plus an MLP, both modulated by the timestep embedding (adaLN with
// zero-initialized modulations). Before each such block sits a temporal
// sub-block: attention across the frames of the chunk together with the
// history frames, from which only the noise frames receive updates.
//
// History frames reuse the spatial pathway: they are embedded like any other
// frame, given the noise-stream coordinates plus their frame encoding, and
// advanced block-by-block through the spatial sub-block at the minimal-noise
// timestep. The per-block intermediate representations feed each block's
// temporal attention as read-only keys/values and can be cached per chunk
// (they do not depend on the sampling timestep).
//
// Dropped conditions: source and driving fall back to learned per-stream
// null tokens; a dropped history shortens the temporal sequence to the chunk
// itself, so no parameter is touched by history content unless history is
// actually conditioned on.

#include <cmath>
#include <string>
#include <vector>

#include "reenact/tensor.hpp"
#include "reenact/tokens.hpp"

namespace reenact {

enum class TemporalMode { full, factorized };

inline const char* temporal_mode_name(TemporalMode m) {
    return m == TemporalMode::full ? "full" : "factorized";
}

// Which control signals are present; only the nested chain
// {} < {S} < {S,D} < {S,D,P} is valid.
struct ConditionConfig {
    bool source = false;
    bool driving = false;
    bool history = false;

    static ConditionConfig none() { return {false, false, false}; }
    static ConditionConfig s() { return {true, false, false}; }
    static ConditionConfig sd() { return {true, true, false}; }
    static ConditionConfig sdp() { return {true, true, true}; }

    void validate() const {
        if ((driving && !source) || (history && !driving))
            throw ContractError(std::string("condition config is not a nested chain: {") +
                                (source ? "S" : "") + (driving ? "D" : "") +
                                (history ? "P" : "") + "}");
    }

    const char* name() const {
        if (history) return "sdp";
        if (driving) return "sd";
        if (source) return "s";
        return "none";
    }

    bool operator==(const ConditionConfig&) const = default;
};

struct ModelConfig {
    int d_model = 64;
    int n_blocks = 4;
    int n_heads = 4;
    int frames_per_chunk = 4;  // F
    int history_frames = 2;    // R
    double mlp_ratio = 4.0;
    TemporalMode temporal_mode = TemporalMode::full;
    PatchSpec patch;
    int pos_gap = 4;
    int t_train = 1000;

    void validate() const {
        patch.validate();
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
            throw ContractError("model config: d_model must be positive and divisible by n_heads");
        if (n_blocks < 1) throw ContractError("model config: need at least one block");
        if (frames_per_chunk < 1) throw ContractError("model config: F must be >= 1");
        if (history_frames < 0) throw ContractError("model config: R must be >= 0");
        if (mlp_ratio <= 0.0) throw ContractError("model config: mlp_ratio must be positive");
        if (t_train < 1) throw ContractError("model config: t_train must be >= 1");
        if (pos_gap < 1) throw ContractError("model config: pos_gap must be >= 1");
    }

    int mlp_hidden() const { return static_cast<int>(d_model * mlp_ratio); }
    bool operator==(const ModelConfig&) const = default;
};

// Per-block history representations consumed by temporal attention.
struct HistoryCache {
    int frames = 0;                  // R actually encoded
    std::vector<Tensor> per_block;   // n_blocks x [R*T_f, d_model]
};

class DiTModel {
public:
    DiTModel(ModelConfig cfg, Rng& init_rng) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.d_model, dt = cfg_.patch.token_dim(), hid = cfg_.mlp_hidden();

        embed_w_ = add_param("embed.w", xavier({dt, d}, init_rng));
        embed_b_ = add_param("embed.b", Tensor::zeros({d}));
        temb_w1_ = add_param("temb.w1", xavier({d, d}, init_rng));
        temb_b1_ = add_param("temb.b1", Tensor::zeros({d}));
        temb_w2_ = add_param("temb.w2", xavier({d, d}, init_rng));
        temb_b2_ = add_param("temb.b2", Tensor::zeros({d}));
        null_source_ = add_param("null.source", small_normal({dt}, init_rng));
        null_driving_ = add_param("null.driving", small_normal({dt}, init_rng));

        blocks_.resize(static_cast<size_t>(cfg_.n_blocks));
        for (int b = 0; b < cfg_.n_blocks; ++b) {
            BlockParams& bp = blocks_[static_cast<size_t>(b)];
            std::string p = "block" + std::to_string(b) + ".";
            for (auto [path, attn] : {std::pair{"temporal.", &bp.temporal},
                                      std::pair{"spatial.", &bp.spatial}}) {
                attn->wq = add_param(p + path + "wq", xavier({d, d}, init_rng));
                attn->wk = add_param(p + path + "wk", xavier({d, d}, init_rng));
                attn->wv = add_param(p + path + "wv", xavier({d, d}, init_rng));
                attn->wo = add_param(p + path + "wo", xavier({d, d}, init_rng));
                attn->bq = add_param(p + path + "bq", Tensor::zeros({d}));
                attn->bk = add_param(p + path + "bk", Tensor::zeros({d}));
                attn->bv = add_param(p + path + "bv", Tensor::zeros({d}));
                attn->bo = add_param(p + path + "bo", Tensor::zeros({d}));
            }
            bp.mlp_w1 = add_param(p + "mlp.w1", xavier({d, hid}, init_rng));
            bp.mlp_b1 = add_param(p + "mlp.b1", Tensor::zeros({hid}));
            bp.mlp_w2 = add_param(p + "mlp.w2", xavier({hid, d}, init_rng));
            bp.mlp_b2 = add_param(p + "mlp.b2", Tensor::zeros({d}));
            // adaLN-zero: 9 modulation vectors (shift/scale/gate for temporal
            // attention, spatial attention, MLP), all starting at zero
            bp.mod_w = add_param(p + "mod.w", Tensor::zeros({d, 9 * d}));
            bp.mod_b = add_param(p + "mod.b", Tensor::zeros({9 * d}));
        }
        head_mod_w_ = add_param("head.mod.w", Tensor::zeros({d, 2 * d}));
        head_mod_b_ = add_param("head.mod.b", Tensor::zeros({2 * d}));
        head_w_ = add_param("head.w", Tensor::zeros({d, dt}));
        head_b_ = add_param("head.b", Tensor::zeros({dt}));

        enc_noise_ = spatial_encoding(Stream::noise, cfg_.patch, cfg_.pos_gap);
        enc_source_ = spatial_encoding(Stream::source, cfg_.patch, cfg_.pos_gap);
        enc_driving_ = spatial_encoding(Stream::driving, cfg_.patch, cfg_.pos_gap);
        frame_enc_.reserve(static_cast<size_t>(window()));
        for (int i = 0; i < window(); ++i)
            frame_enc_.push_back(frame_encoding(i, window(), dt));
    }

    const ModelConfig& config() const { return cfg_; }
    int window() const { return cfg_.history_frames + cfg_.frames_per_chunk; }

    std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    Tensor param(const std::string& name) const {
        for (const auto& [n, t] : params_)
            if (n == name) return t;
        throw ContractError("unknown parameter: " + name);
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    // Sinusoidal embedding of the diffusion timestep through a 2-layer MLP.
    Tensor timestep_embed(int t) const {
        if (t < 0 || t > cfg_.t_train)
            throw ContractError("timestep_embed: t=" + std::to_string(t) +
                                " outside [0, " + std::to_string(cfg_.t_train) + "]");
        const int d = cfg_.d_model;
        Tensor base({1, d});
        int pairs = d / 2;
        for (int i = 0; i < pairs; ++i) {
            double freq = std::pow(10000.0, -static_cast<double>(i) / pairs);
            base.data()[2 * i] = std::sin(t * freq);
            base.data()[2 * i + 1] = std::cos(t * freq);
        }
        Tensor h = gelu(linear(base, temb_w1_, temb_b1_));
        return linear(h, temb_w2_, temb_b2_);
    }

    // History pathway: embed history tokens with the shared patch embedder at
    // noise-stream coordinates plus frame encodings 0..R-1, then advance them
    // through the spatial sub-blocks at timestep 0.
    HistoryCache encode_history(const std::vector<Tensor>& history_tokens) const {
        HistoryCache cache;
        cache.frames = static_cast<int>(history_tokens.size());
        if (history_tokens.empty()) return cache;
        if (cache.frames > cfg_.history_frames)
            throw DimError("encode_history: got " + std::to_string(cache.frames) +
                           " frames, model allows R=" + std::to_string(cfg_.history_frames));

        Tensor t0 = timestep_embed(0);
        Tensor g0 = gelu(t0);
        std::vector<Tensor> frames;
        frames.reserve(history_tokens.size());
        for (size_t r = 0; r < history_tokens.size(); ++r) {
            check_tokens(history_tokens[r], "history");
            Tensor tok = add(history_tokens[r], enc_noise_);
            tok = add_rowvec(tok, frame_enc_[r]);
            frames.push_back(embed(tok));
        }
        cache.per_block.reserve(static_cast<size_t>(cfg_.n_blocks));
        for (int b = 0; b < cfg_.n_blocks; ++b) {
            cache.per_block.push_back(frames.size() == 1 ? frames[0] : concat(frames, 0));
            BlockMods mods = block_modulations(b, g0);
            for (auto& f : frames) f = spatial_subblock(f, b, mods);
        }
        return cache;
    }

    // Full forward pass: predicts the noise for each chunk frame.
    // noise/source/driving/history are token-space matrices [T_f, d_tok];
    // dropped conditions may be passed as empty and are never read.
    std::vector<Tensor> forward(const std::vector<Tensor>& noise_tokens, int t,
                                const Tensor& source_tokens,
                                const std::vector<Tensor>& driving_tokens,
                                const std::vector<Tensor>& history_tokens,
                                const ConditionConfig& cond,
                                const HistoryCache* cached_history = nullptr) const {
        cond.validate();
        const int F = cfg_.frames_per_chunk, Tf = cfg_.patch.tokens_per_frame();
        if (static_cast<int>(noise_tokens.size()) != F)
            throw DimError("forward: expected " + std::to_string(F) + " noise frames, got " +
                           std::to_string(noise_tokens.size()));
        for (const auto& z : noise_tokens) check_tokens(z, "noise");
        if (cond.driving && static_cast<int>(driving_tokens.size()) != F)
            throw DimError("forward: expected " + std::to_string(F) + " driving frames, got " +
                           std::to_string(driving_tokens.size()));

        // condition substitution
        Tensor src = cond.source ? source_tokens : broadcast_row(null_source_, Tf);
        if (cond.source) check_tokens(src, "source");
        Tensor drv_null;
        if (!cond.driving) drv_null = broadcast_row(null_driving_, Tf);

        // positional encodings in token space, then the shared embedding
        Tensor s0 = embed(add(src, enc_source_));
        std::vector<Tensor> z(static_cast<size_t>(F)), s(static_cast<size_t>(F)),
            dr(static_cast<size_t>(F));
        for (int f = 0; f < F; ++f) {
            Tensor zt = add(noise_tokens[static_cast<size_t>(f)], enc_noise_);
            zt = add_rowvec(zt, frame_enc_[static_cast<size_t>(cfg_.history_frames + f)]);
            z[static_cast<size_t>(f)] = embed(zt);
            s[static_cast<size_t>(f)] = s0;
            const Tensor& d_tok = cond.driving ? driving_tokens[static_cast<size_t>(f)] : drv_null;
            if (cond.driving) check_tokens(d_tok, "driving");
            dr[static_cast<size_t>(f)] = embed(add(d_tok, enc_driving_));
        }

        // history representations (dropped history never enters the graph)
        HistoryCache local_cache;
        const HistoryCache* hist = nullptr;
        if (cond.history) {
            if (cached_history != nullptr) {
                hist = cached_history;
            } else {
                local_cache = encode_history(history_tokens);
                hist = &local_cache;
            }
        }

        Tensor t_emb = timestep_embed(t);
        Tensor g = gelu(t_emb);

        for (int b = 0; b < cfg_.n_blocks; ++b) {
            BlockMods mods = block_modulations(b, g);
            const Tensor* hist_rep = nullptr;
            if (hist != nullptr && hist->frames > 0)
                hist_rep = &hist->per_block[static_cast<size_t>(b)];
            temporal_subblock(z, hist_rep, b, mods);
            for (int f = 0; f < F; ++f) {
                auto fi = static_cast<size_t>(f);
                Tensor seq = concat({z[fi], s[fi], dr[fi]}, 0);  // [3*T_f, d]
                seq = spatial_subblock(seq, b, mods);
                z[fi] = slice(seq, 0, 0, Tf);
                s[fi] = slice(seq, 0, Tf, Tf);
                dr[fi] = slice(seq, 0, 2 * Tf, Tf);
            }
        }

        // final adaLN + linear head back to token space
        Tensor fm = linear(g, head_mod_w_, head_mod_b_);
        Tensor f_shift = slice(fm, 1, 0, cfg_.d_model);
        Tensor f_scale = slice(fm, 1, cfg_.d_model, cfg_.d_model);
        std::vector<Tensor> eps;
        eps.reserve(static_cast<size_t>(F));
        for (int f = 0; f < F; ++f) {
            Tensor xn = ln_modulate(z[static_cast<size_t>(f)], f_shift, f_scale);
            eps.push_back(linear(xn, head_w_, head_b_));
        }
        return eps;
    }

    // Test hook: when set, every attention records (rows, cols) of its
    // probability matrix and the worst row-sum deviation from 1.
    struct AttnProbe {
        std::vector<std::pair<int64_t, int64_t>> shapes;
        double max_row_sum_err = 0.0;
    };
    static inline thread_local AttnProbe* attn_probe = nullptr;

    struct Mod {
        Tensor shift, scale, gate;
    };
    struct BlockMods {
        Mod t_attn, s_attn, mlp;
    };

private:
    struct AttnParams {
        Tensor wq, wk, wv, wo, bq, bk, bv, bo;
    };

    Tensor add_param(const std::string& name, Tensor t) {
        t.set_requires_grad(true);
        params_.emplace_back(name, t);
        return t;
    }

    static Tensor xavier(Shape shape, Rng& rng) {
        double fan_in = static_cast<double>(shape[0]);
        double fan_out = static_cast<double>(shape[shape.size() - 1]);
        double std_dev = std::sqrt(2.0 / (fan_in + fan_out));
        Tensor t = Tensor::randn(shape, rng);
        for (auto& v : t.vec()) v *= std_dev;
        return t;
    }

    static Tensor small_normal(Shape shape, Rng& rng) {
        Tensor t = Tensor::randn(std::move(shape), rng);
        for (auto& v : t.vec()) v *= 0.02;
        return t;
    }

    void check_tokens(const Tensor& t, const char* what) const {
        if (t.rank() != 2 || t.dim(0) != cfg_.patch.tokens_per_frame() ||
            t.dim(1) != cfg_.patch.token_dim())
            throw DimError(std::string("forward: ") + what + " tokens have shape " +
                           shape_str(t.shape()) + ", expected [" +
                           std::to_string(cfg_.patch.tokens_per_frame()) + ", " +
                           std::to_string(cfg_.patch.token_dim()) + "]");
    }

    Tensor embed(const Tensor& tokens) const {
        return linear(tokens, embed_w_, embed_b_);
    }

public:
    BlockMods block_modulations(int block, const Tensor& gelu_temb) const {
        const BlockParams& bp = blocks_[static_cast<size_t>(block)];
        Tensor m = linear(gelu_temb, bp.mod_w, bp.mod_b);
        const int d = cfg_.d_model;
        auto chunk = [&](int i) { return slice(m, 1, i * d, d); };
        return BlockMods{{chunk(0), chunk(1), chunk(2)},
                         {chunk(3), chunk(4), chunk(5)},
                         {chunk(6), chunk(7), chunk(8)}};
    }

    Tensor modulate(const Tensor& x, const Mod& mod) const {
        return ln_modulate(x, mod.shift, mod.scale);
    }

private:

    // Multi-head attention; queries and keys/values may come from different
    // sequences (history rows are read-only keys/values).
    Tensor attention(const Tensor& q_in, const Tensor& kv_in, const AttnParams& w) const {
        Tensor q = linear(q_in, w.wq, w.bq);
        Tensor k = linear(kv_in, w.wk, w.bk);
        Tensor v = linear(kv_in, w.wv, w.bv);
        auto* probe_shapes = attn_probe != nullptr ? &attn_probe->shapes : nullptr;
        auto* probe_err = attn_probe != nullptr ? &attn_probe->max_row_sum_err : nullptr;
        Tensor o = multi_head_attention(q, k, v, cfg_.n_heads, probe_shapes, probe_err);
        return linear(o, w.wo, w.bo);
    }

public:
    // Spatial sub-block: modulated attention + modulated MLP with gated
    // residuals; operates on any [S, d] sequence.
    Tensor spatial_subblock(const Tensor& x_in, int block, const BlockMods& mods) const {
        const BlockParams& bp = blocks_[static_cast<size_t>(block)];
        Tensor x = x_in;
        Tensor xm = modulate(x, mods.s_attn);
        Tensor att = attention(xm, xm, bp.spatial);
        x = gate_add(x, att, mods.s_attn.gate);
        Tensor xm2 = modulate(x, mods.mlp);
        Tensor h = gelu(linear(xm2, bp.mlp_w1, bp.mlp_b1));
        Tensor mlp_out = linear(h, bp.mlp_w2, bp.mlp_b2);
        return gate_add(x, mlp_out, mods.mlp.gate);
    }

    // Temporal sub-block: attention across the frame axis. Only the noise
    // frames are updated; history representations contribute keys/values.
    void temporal_subblock(std::vector<Tensor>& z, const Tensor* hist_rep, int block,
                           const BlockMods& mods) const {
        const int F = cfg_.frames_per_chunk, Tf = cfg_.patch.tokens_per_frame();
        if (hist_rep != nullptr && hist_rep->dim(1) != cfg_.d_model)
            throw DimError("temporal attention: history width mismatch");
        Tensor noise_seq = F == 1 ? z[0] : concat(z, 0);  // [F*T_f, d]
        Tensor full_seq =
            hist_rep != nullptr ? concat({*hist_rep, noise_seq}, 0) : noise_seq;
        Tensor xn = modulate(full_seq, mods.t_attn);
        int64_t hist_rows = hist_rep != nullptr ? hist_rep->dim(0) : 0;
        Tensor q_in = hist_rep != nullptr
                          ? slice(xn, 0, hist_rows, static_cast<int64_t>(F) * Tf)
                          : xn;

        Tensor att;
        if (cfg_.temporal_mode == TemporalMode::full) {
            att = attention(q_in, xn, blocks_[static_cast<size_t>(block)].temporal);
        } else {
            att = factorized_attention(q_in, xn, block);
        }
        Tensor updated = gate_add(noise_seq, att, mods.t_attn.gate);
        for (int f = 0; f < F; ++f)
            z[static_cast<size_t>(f)] = slice(updated, 0, static_cast<int64_t>(f) * Tf, Tf);
    }

private:

    // Factorized variant: each grid position attends only to its own
    // position across frames. Same projections as full mode, so parameter
    // shapes are identical; only the attention pattern differs.
    Tensor factorized_attention(const Tensor& q_in, const Tensor& kv_in, int block) const {
        const AttnParams& w = blocks_[static_cast<size_t>(block)].temporal;
        const int64_t Tf = cfg_.patch.tokens_per_frame();
        const int64_t fq = q_in.dim(0) / Tf, fkv = kv_in.dim(0) / Tf;
        Tensor q = linear(q_in, w.wq, w.bq);
        Tensor k = linear(kv_in, w.wk, w.bk);
        Tensor v = linear(kv_in, w.wv, w.bv);
        auto* probe_shapes = attn_probe != nullptr ? &attn_probe->shapes : nullptr;
        auto* probe_err = attn_probe != nullptr ? &attn_probe->max_row_sum_err : nullptr;

        std::vector<Tensor> pos_out;
        pos_out.reserve(static_cast<size_t>(Tf));
        for (int64_t pos = 0; pos < Tf; ++pos) {
            std::vector<int64_t> q_rows(static_cast<size_t>(fq)), kv_rows(static_cast<size_t>(fkv));
            for (int64_t f = 0; f < fq; ++f) q_rows[static_cast<size_t>(f)] = f * Tf + pos;
            for (int64_t f = 0; f < fkv; ++f) kv_rows[static_cast<size_t>(f)] = f * Tf + pos;
            Tensor qp = gather_rows(q, q_rows);
            Tensor kp = gather_rows(k, kv_rows);
            Tensor vp = gather_rows(v, kv_rows);
            pos_out.push_back(
                multi_head_attention(qp, kp, vp, cfg_.n_heads, probe_shapes, probe_err));
        }
        // pos_out is position-major [T_f x F, d]; restore frame-major order
        Tensor stacked = Tf == 1 ? pos_out[0] : concat(pos_out, 0);
        std::vector<int64_t> perm(static_cast<size_t>(Tf * fq));
        for (int64_t f = 0; f < fq; ++f)
            for (int64_t pos = 0; pos < Tf; ++pos)
                perm[static_cast<size_t>(f * Tf + pos)] = pos * fq + f;
        Tensor o = gather_rows(stacked, perm);
        return linear(o, w.wo, w.bo);
    }

    struct BlockParams {
        AttnParams temporal, spatial;
        Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2, mod_w, mod_b;
    };

    ModelConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
    Tensor embed_w_, embed_b_, temb_w1_, temb_b1_, temb_w2_, temb_b2_;
    Tensor null_source_, null_driving_;
    Tensor head_mod_w_, head_mod_b_, head_w_, head_b_;
    std::vector<BlockParams> blocks_;
    Tensor enc_noise_, enc_source_, enc_driving_;
    std::vector<Tensor> frame_enc_;
};

}  // namespace reenact
