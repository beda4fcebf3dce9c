#pragma once

// Decoder-only causal transformer with additive token/position/speaker/
// response-role embeddings, written directly against Eigen with hand-derived
// gradients. The scalar type is a template parameter: float for training,
// double for the finite-difference gradient check.
//
// Architecture: pre-normalization blocks (causal multi-head self-attention,
// then a two-layer feed-forward with exact GELU), final LayerNorm, output
// projection tied to the token embedding table. Initialization draws
// embedding tables and projection matrices from N(0, 0.02); biases start at
// zero and LayerNorm gains at one.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcturn/rng.hpp"
#include "rcturn/sequencing.hpp"
#include "rcturn/version.hpp"
#include "rcturn/vocab.hpp"

namespace rcturn {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 256;
    int max_seq_len = 128;
    double dropout_rate = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
            max_seq_len <= 0)
            throw std::invalid_argument("model dimensions must be positive");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("d_model must be divisible by n_heads");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw std::invalid_argument("dropout_rate must lie in [0,1)");
    }

    bool operator==(const ModelConfig&) const = default;
};

// Padded batch of encoded sequences, row-major (b * length + t).
struct Batch {
    int n_seqs = 0;
    int max_len = 0;
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> speakers;
    std::vector<std::uint8_t> resp_flags;
    std::vector<std::uint8_t> loss_mask;
    std::vector<int> lengths;

    std::size_t idx(int b, int t) const {
        return static_cast<std::size_t>(b) * static_cast<std::size_t>(max_len) +
               static_cast<std::size_t>(t);
    }
};

inline Batch make_batch(const std::vector<const EncodedSequence*>& seqs) {
    if (seqs.empty()) throw std::invalid_argument("cannot build an empty batch");
    Batch batch;
    batch.n_seqs = static_cast<int>(seqs.size());
    for (const auto* s : seqs)
        batch.max_len = std::max(batch.max_len, static_cast<int>(s->length()));
    const std::size_t total =
        static_cast<std::size_t>(batch.n_seqs) * static_cast<std::size_t>(batch.max_len);
    batch.tokens.assign(total, kPadId);
    batch.speakers.assign(total, 0);
    batch.resp_flags.assign(total, 0);
    batch.loss_mask.assign(total, 0);
    batch.lengths.resize(seqs.size());
    for (int b = 0; b < batch.n_seqs; ++b) {
        const auto& s = *seqs[static_cast<std::size_t>(b)];
        batch.lengths[static_cast<std::size_t>(b)] = static_cast<int>(s.length());
        for (std::size_t t = 0; t < s.length(); ++t) {
            const auto i = batch.idx(b, static_cast<int>(t));
            batch.tokens[i] = s.token_ids[t];
            batch.speakers[i] = s.speaker_ids[t];
            batch.resp_flags[i] = s.response_flags[t];
            batch.loss_mask[i] = s.loss_mask[t];
        }
    }
    return batch;
}

inline Batch make_batch(const EncodedSequence& seq) { return make_batch({&seq}); }

// Per-CU-word turn-shift probabilities. probs[k] is the probability assigned
// to TS as the next token after CU word k; probs[end_index] is the
// ground-truth shift probability. Values are canonicalized to 6 decimals so
// the in-memory trace and the exported record are identical.
struct TsTrace {
    std::string dialog_id;
    int cu_index = 0;
    std::vector<std::string> words;
    std::vector<double> probs;
    int end_index = 0;
    nlohmann::json tags; // carried in memory for breakdowns; not serialized
};

inline double canon6(double p) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", p);
    return std::strtod(buf, nullptr);
}

namespace nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
inline S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x / S(std::sqrt(2.0))));
}

template <typename S>
inline S gelu_grad(S x) {
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    const S cdf = S(0.5) * (S(1) + std::erf(x / S(std::sqrt(2.0))));
    const S pdf = S(std::exp(-0.5 * double(x) * double(x)) * kInvSqrt2Pi);
    return cdf + x * pdf;
}

} // namespace nn

template <typename S>
struct ForwardCache {
    using Mat = nn::Mat<S>;

    Mat x0;              // embedding sum after dropout
    std::vector<std::uint8_t> emb_drop;
    struct Layer {
        Mat ln1_out, ln2_out;
        nn::Vec<S> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
        Mat q, k, v;          // (B*L, d)
        std::vector<Mat> att; // per (b, head): (L, L) post-softmax
        Mat ctx;              // heads re-concatenated, before out projection
        Mat attn_out;         // after out projection and dropout
        std::vector<std::uint8_t> attn_drop;
        Mat x_mid;            // residual after attention
        Mat ff_pre;           // (B*L, d_ff) before GELU
        Mat ff_act;           // after GELU
        Mat mlp_out;          // after second projection and dropout
        std::vector<std::uint8_t> mlp_drop;
        Mat x_out;            // residual after mlp
    };
    std::vector<Layer> layers;
    Mat lnf_out;
    nn::Vec<S> lnf_mean, lnf_rstd;
};

template <typename S>
class TransformerLM {
public:
    using Mat = nn::Mat<S>;
    using CMap = Eigen::Map<const Mat>;
    using MMap = Eigen::Map<Mat>;

    struct BlockInfo {
        std::string name;
        int rows = 0, cols = 0;
        std::size_t offset = 0;
    };

    ModelConfig cfg;
    std::vector<S> params;

    static TransformerLM init(const ModelConfig& cfg) {
        cfg.validate();
        TransformerLM m;
        m.cfg = cfg;
        m.build_layout();
        m.params.assign(m.total_params_, S(0));
        Rng rng(cfg.seed);
        for (const auto& b : m.blocks_) {
            const bool gain = b.name.size() >= 2 && b.name.compare(b.name.size() - 2, 2, ".g") == 0;
            const bool bias = (b.name.size() >= 2 && b.name.compare(b.name.size() - 2, 2, ".b") == 0) ||
                              b.name.find(".b") != std::string::npos;
            S* p = m.params.data() + b.offset;
            const std::size_t n = static_cast<std::size_t>(b.rows) * static_cast<std::size_t>(b.cols);
            if (gain)
                for (std::size_t i = 0; i < n; ++i) p[i] = S(1);
            else if (bias)
                ; // already zero
            else
                for (std::size_t i = 0; i < n; ++i) p[i] = S(rng.normal(0.0, 0.02));
        }
        return m;
    }

    const std::vector<BlockInfo>& blocks() const { return blocks_; }
    std::size_t n_params() const { return total_params_; }

    // Closed-form parameter count for a config, independent of init.
    static std::size_t param_count(const ModelConfig& c) {
        const std::size_t d = static_cast<std::size_t>(c.d_model);
        const std::size_t dff = static_cast<std::size_t>(c.d_ff);
        std::size_t n = 0;
        n += static_cast<std::size_t>(c.vocab_size) * d;  // tok_emb (tied output)
        n += static_cast<std::size_t>(c.max_seq_len) * d; // pos_emb
        n += 2 * d;                                       // spk_emb
        n += d;                                           // resp_emb
        n += static_cast<std::size_t>(c.n_layers) *
             (2 * d + 2 * d       // ln1, ln2
              + 4 * d * d + 4 * d // wq wk wv wo + biases
              + d * dff + dff     // w1 + b1
              + dff * d + d);     // w2 + b2
        n += 2 * d; // ln_f
        return n;
    }

    CMap view(const std::string& name) const {
        const auto& b = find(name);
        return CMap(params.data() + b.offset, b.rows, b.cols);
    }
    static MMap view_in(std::vector<S>& buf, const BlockInfo& b) {
        return MMap(buf.data() + b.offset, b.rows, b.cols);
    }
    const BlockInfo& find(const std::string& name) const {
        for (const auto& b : blocks_)
            if (b.name == name) return b;
        throw std::out_of_range("no parameter block named " + name);
    }

    // ------------------------------------------------------------------
    // forward
    // ------------------------------------------------------------------

    Mat forward(const Batch& batch, bool train_mode = false, Rng* dropout_rng = nullptr,
                ForwardCache<S>* cache = nullptr) const {
        validate_batch(batch);
        ForwardCache<S> local;
        ForwardCache<S>& c = cache ? *cache : local;
        const int rows = batch.n_seqs * batch.max_len;
        const int d = cfg.d_model;

        // additive embeddings
        c.x0.setZero(rows, d);
        {
            auto tok = view("tok_emb");
            auto pos = view("pos_emb");
            auto spk = view("spk_emb");
            auto resp = view("resp_emb");
            for (int b = 0; b < batch.n_seqs; ++b) {
                for (int t = 0; t < batch.max_len; ++t) {
                    const auto i = batch.idx(b, t);
                    const int r = b * batch.max_len + t;
                    c.x0.row(r) = tok.row(batch.tokens[i]) + pos.row(t) +
                                  spk.row(batch.speakers[i]);
                    if (batch.resp_flags[i]) c.x0.row(r) += resp.row(0);
                }
            }
        }
        apply_dropout(c.x0, train_mode, dropout_rng, c.emb_drop);

        c.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        Mat x = c.x0;
        for (int li = 0; li < cfg.n_layers; ++li) {
            auto& L = c.layers[static_cast<std::size_t>(li)];
            const std::string p = "layer" + std::to_string(li) + ".";

            layer_norm(x, view(p + "ln1.g"), view(p + "ln1.b"), L.ln1_out, L.ln1_mean, L.ln1_rstd);

            L.q = (L.ln1_out * view(p + "attn.wq")).rowwise() + row_of(p + "attn.bq");
            L.k = (L.ln1_out * view(p + "attn.wk")).rowwise() + row_of(p + "attn.bk");
            L.v = (L.ln1_out * view(p + "attn.wv")).rowwise() + row_of(p + "attn.bv");

            attention(batch, L);

            L.attn_out = (L.ctx * view(p + "attn.wo")).rowwise() + row_of(p + "attn.bo");
            apply_dropout(L.attn_out, train_mode, dropout_rng, L.attn_drop);
            L.x_mid = x + L.attn_out;

            layer_norm(L.x_mid, view(p + "ln2.g"), view(p + "ln2.b"), L.ln2_out, L.ln2_mean,
                       L.ln2_rstd);
            L.ff_pre = (L.ln2_out * view(p + "mlp.w1")).rowwise() + row_of(p + "mlp.b1");
            L.ff_act = L.ff_pre.unaryExpr([](S v) { return nn::gelu(v); });
            L.mlp_out = (L.ff_act * view(p + "mlp.w2")).rowwise() + row_of(p + "mlp.b2");
            apply_dropout(L.mlp_out, train_mode, dropout_rng, L.mlp_drop);
            L.x_out = L.x_mid + L.mlp_out;
            x = L.x_out;
        }

        layer_norm(x, view("ln_f.g"), view("ln_f.b"), c.lnf_out, c.lnf_mean, c.lnf_rstd);
        return c.lnf_out * view("tok_emb").transpose(); // tied projection
    }

    // Mean over loss-masked positions t of -log softmax(logits[t-1])[token t].
    // Fills dlogits (same shape as logits) when given.
    double nll_loss(const Mat& logits, const Batch& batch, Mat* dlogits = nullptr) const {
        std::size_t n_terms = 0;
        for (std::size_t i = 0; i < batch.loss_mask.size(); ++i)
            if (batch.loss_mask[i]) ++n_terms;
        if (n_terms == 0) throw std::invalid_argument("loss mask selects no positions");
        if (dlogits) dlogits->setZero(logits.rows(), logits.cols());

        double total = 0.0;
        const S inv_n = S(1) / static_cast<S>(n_terms);
        for (int b = 0; b < batch.n_seqs; ++b) {
            for (int t = 0; t < batch.lengths[static_cast<std::size_t>(b)]; ++t) {
                if (!batch.loss_mask[batch.idx(b, t)]) continue;
                // loss_mask[0] is false by construction, so t >= 1 here
                const int r = b * batch.max_len + (t - 1);
                const TokenId target = batch.tokens[batch.idx(b, t)];
                const S m = logits.row(r).maxCoeff();
                S lse = S(0);
                for (int vv = 0; vv < logits.cols(); ++vv) lse += std::exp(logits(r, vv) - m);
                const S log_z = m + std::log(lse);
                total += double(log_z - logits(r, target));
                if (dlogits) {
                    for (int vv = 0; vv < logits.cols(); ++vv)
                        (*dlogits)(r, vv) += std::exp(logits(r, vv) - log_z) * inv_n;
                    (*dlogits)(r, target) -= inv_n;
                }
            }
        }
        return total / static_cast<double>(n_terms);
    }

    // Full backward pass; adds parameter gradients into grads (layout of params).
    void backward(const Batch& batch, const ForwardCache<S>& c, const Mat& dlogits,
                  std::vector<S>& grads) const {
        if (grads.size() != total_params_) grads.assign(total_params_, S(0));
        const int d = cfg.d_model;

        // tied projection: logits = lnf_out * tok_emb^T
        view_in(grads, find("tok_emb")).noalias() += dlogits.transpose() * c.lnf_out;
        Mat dx = dlogits * view("tok_emb");

        layer_norm_backward(c.layers.empty() ? c.x0 : c.layers.back().x_out, c.lnf_out,
                            c.lnf_mean, c.lnf_rstd, view("ln_f.g"), dx, grads, find("ln_f.g"),
                            find("ln_f.b"));

        for (int li = cfg.n_layers - 1; li >= 0; --li) {
            const auto& L = c.layers[static_cast<std::size_t>(li)];
            const std::string p = "layer" + std::to_string(li) + ".";
            const Mat& x_in = li == 0 ? c.x0 : c.layers[static_cast<std::size_t>(li - 1)].x_out;

            // mlp branch
            Mat d_mlp = dx; // gradient into x_out flows to both residual terms
            dropout_backward(d_mlp, L.mlp_drop);
            view_in(grads, find(p + "mlp.b2")).noalias() += d_mlp.colwise().sum();
            view_in(grads, find(p + "mlp.w2")).noalias() += L.ff_act.transpose() * d_mlp;
            Mat d_act = d_mlp * view(p + "mlp.w2").transpose();
            Mat d_pre =
                d_act.binaryExpr(L.ff_pre, [](S g, S x) { return g * nn::gelu_grad(x); });
            view_in(grads, find(p + "mlp.b1")).noalias() += d_pre.colwise().sum();
            view_in(grads, find(p + "mlp.w1")).noalias() += L.ln2_out.transpose() * d_pre;
            Mat d_ln2 = d_pre * view(p + "mlp.w1").transpose();
            layer_norm_backward(L.x_mid, L.ln2_out, L.ln2_mean, L.ln2_rstd, view(p + "ln2.g"),
                                d_ln2, grads, find(p + "ln2.g"), find(p + "ln2.b"));
            dx += d_ln2;

            // attention branch
            Mat d_attn = dx;
            dropout_backward(d_attn, L.attn_drop);
            view_in(grads, find(p + "attn.bo")).noalias() += d_attn.colwise().sum();
            view_in(grads, find(p + "attn.wo")).noalias() += L.ctx.transpose() * d_attn;
            Mat d_ctx = d_attn * view(p + "attn.wo").transpose();

            Mat dq = Mat::Zero(d_ctx.rows(), d);
            Mat dk = Mat::Zero(d_ctx.rows(), d);
            Mat dv = Mat::Zero(d_ctx.rows(), d);
            attention_backward(batch, L, d_ctx, dq, dk, dv);

            view_in(grads, find(p + "attn.bq")).noalias() += dq.colwise().sum();
            view_in(grads, find(p + "attn.bk")).noalias() += dk.colwise().sum();
            view_in(grads, find(p + "attn.bv")).noalias() += dv.colwise().sum();
            view_in(grads, find(p + "attn.wq")).noalias() += L.ln1_out.transpose() * dq;
            view_in(grads, find(p + "attn.wk")).noalias() += L.ln1_out.transpose() * dk;
            view_in(grads, find(p + "attn.wv")).noalias() += L.ln1_out.transpose() * dv;
            Mat d_ln1 = dq * view(p + "attn.wq").transpose() +
                        dk * view(p + "attn.wk").transpose() +
                        dv * view(p + "attn.wv").transpose();
            layer_norm_backward(x_in, L.ln1_out, L.ln1_mean, L.ln1_rstd, view(p + "ln1.g"),
                                d_ln1, grads, find(p + "ln1.g"), find(p + "ln1.b"));
            dx += d_ln1;
        }

        // embedding scatter
        dropout_backward(dx, c.emb_drop);
        {
            auto tok = view_in(grads, find("tok_emb"));
            auto pos = view_in(grads, find("pos_emb"));
            auto spk = view_in(grads, find("spk_emb"));
            auto resp = view_in(grads, find("resp_emb"));
            for (int b = 0; b < batch.n_seqs; ++b) {
                for (int t = 0; t < batch.max_len; ++t) {
                    const auto i = batch.idx(b, t);
                    const int r = b * batch.max_len + t;
                    tok.row(batch.tokens[i]) += dx.row(r);
                    pos.row(t) += dx.row(r);
                    spk.row(batch.speakers[i]) += dx.row(r);
                    if (batch.resp_flags[i]) resp.row(0) += dx.row(r);
                }
            }
        }
    }

    struct LossResult {
        double loss = 0.0;
        std::vector<S> grads;
    };

    LossResult loss_and_grad(const Batch& batch, bool train_mode = false,
                             Rng* dropout_rng = nullptr) const {
        ForwardCache<S> cache;
        const Mat logits = forward(batch, train_mode, dropout_rng, &cache);
        Mat dlogits;
        LossResult res;
        res.loss = nll_loss(logits, batch, &dlogits);
        if (!std::isfinite(res.loss)) throw std::runtime_error("non-finite training loss");
        res.grads.assign(total_params_, S(0));
        backward(batch, cache, dlogits, res.grads);
        return res;
    }

    double eval_loss(const Batch& batch) const {
        const Mat logits = forward(batch, false, nullptr, nullptr);
        return nll_loss(logits, batch, nullptr);
    }

    // Probability of TS as the next token, read at a given position.
    static double ts_prob_at(const Mat& logits, int row) {
        const S m = logits.row(row).maxCoeff();
        S lse = S(0);
        for (int v = 0; v < logits.cols(); ++v) lse += std::exp(logits(row, v) - m);
        return double(std::exp(logits(row, kTsId) - m) / lse);
    }

private:
    std::vector<BlockInfo> blocks_;
    std::size_t total_params_ = 0;

    Eigen::Matrix<S, 1, Eigen::Dynamic> row_of(const std::string& name) const {
        return view(name).row(0);
    }

    void add_block(const std::string& name, int rows, int cols) {
        blocks_.push_back({name, rows, cols, total_params_});
        total_params_ += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    }

    void build_layout() {
        blocks_.clear();
        total_params_ = 0;
        add_block("tok_emb", cfg.vocab_size, cfg.d_model);
        add_block("pos_emb", cfg.max_seq_len, cfg.d_model);
        add_block("spk_emb", 2, cfg.d_model);
        add_block("resp_emb", 1, cfg.d_model);
        for (int li = 0; li < cfg.n_layers; ++li) {
            const std::string p = "layer" + std::to_string(li) + ".";
            add_block(p + "ln1.g", 1, cfg.d_model);
            add_block(p + "ln1.b", 1, cfg.d_model);
            add_block(p + "attn.wq", cfg.d_model, cfg.d_model);
            add_block(p + "attn.bq", 1, cfg.d_model);
            add_block(p + "attn.wk", cfg.d_model, cfg.d_model);
            add_block(p + "attn.bk", 1, cfg.d_model);
            add_block(p + "attn.wv", cfg.d_model, cfg.d_model);
            add_block(p + "attn.bv", 1, cfg.d_model);
            add_block(p + "attn.wo", cfg.d_model, cfg.d_model);
            add_block(p + "attn.bo", 1, cfg.d_model);
            add_block(p + "ln2.g", 1, cfg.d_model);
            add_block(p + "ln2.b", 1, cfg.d_model);
            add_block(p + "mlp.w1", cfg.d_model, cfg.d_ff);
            add_block(p + "mlp.b1", 1, cfg.d_ff);
            add_block(p + "mlp.w2", cfg.d_ff, cfg.d_model);
            add_block(p + "mlp.b2", 1, cfg.d_model);
        }
        add_block("ln_f.g", 1, cfg.d_model);
        add_block("ln_f.b", 1, cfg.d_model);
    }

    void validate_batch(const Batch& batch) const {
        if (batch.max_len > cfg.max_seq_len)
            throw std::runtime_error("batch length " + std::to_string(batch.max_len) +
                                     " exceeds model max length " +
                                     std::to_string(cfg.max_seq_len));
        for (TokenId t : batch.tokens)
            if (t < 0 || t >= cfg.vocab_size)
                throw std::runtime_error("token id " + std::to_string(t) +
                                         " outside vocabulary of size " +
                                         std::to_string(cfg.vocab_size));
    }

    static constexpr double kLnEps = 1e-5;

    void layer_norm(const Mat& x, CMap g, CMap b, Mat& out, nn::Vec<S>& mean,
                    nn::Vec<S>& rstd) const {
        const auto rows = x.rows();
        const auto cols = x.cols();
        out.resize(rows, cols);
        mean.resize(rows);
        rstd.resize(rows);
        for (Eigen::Index r = 0; r < rows; ++r) {
            const S mu = x.row(r).mean();
            const S var = (x.row(r).array() - mu).square().sum() / S(cols);
            const S rs = S(1) / std::sqrt(var + S(kLnEps));
            mean[r] = mu;
            rstd[r] = rs;
            out.row(r) =
                (((x.row(r).array() - mu) * rs) * g.row(0).array() + b.row(0).array()).matrix();
        }
    }

    void layer_norm_backward(const Mat& x, const Mat& /*y*/, const nn::Vec<S>& mean,
                             const nn::Vec<S>& rstd, CMap g, Mat& dy_to_dx,
                             std::vector<S>& grads, const BlockInfo& g_block,
                             const BlockInfo& b_block) const {
        // dy_to_dx holds dL/dy on entry and dL/dx on exit
        auto dg = view_in(grads, g_block);
        auto db = view_in(grads, b_block);
        const auto cols = x.cols();
        Eigen::Matrix<S, 1, Eigen::Dynamic> xhat(cols), dxhat(cols);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            xhat = ((x.row(r).array() - mean[r]) * rstd[r]).matrix();
            dg.row(0) += dy_to_dx.row(r).cwiseProduct(xhat);
            db.row(0) += dy_to_dx.row(r);
            dxhat = dy_to_dx.row(r).cwiseProduct(g.row(0));
            const S m1 = dxhat.mean();
            const S m2 = dxhat.cwiseProduct(xhat).mean();
            dy_to_dx.row(r) =
                ((dxhat.array() - m1 - xhat.array() * m2) * rstd[r]).matrix();
        }
    }

    void attention(const Batch& batch, typename ForwardCache<S>::Layer& L) const {
        const int d = cfg.d_model;
        const int hd = d / cfg.n_heads;
        const S scale = S(1) / S(std::sqrt(double(hd)));
        const int Lmax = batch.max_len;
        L.ctx.setZero(L.q.rows(), d);
        L.att.assign(static_cast<std::size_t>(batch.n_seqs * cfg.n_heads), Mat());
        for (int b = 0; b < batch.n_seqs; ++b) {
            const int base = b * Lmax;
            const int len = batch.lengths[static_cast<std::size_t>(b)];
            for (int h = 0; h < cfg.n_heads; ++h) {
                auto qh = L.q.block(base, h * hd, Lmax, hd);
                auto kh = L.k.block(base, h * hd, Lmax, hd);
                auto vh = L.v.block(base, h * hd, Lmax, hd);
                Mat& att = L.att[static_cast<std::size_t>(b * cfg.n_heads + h)];
                att.setZero(Lmax, Lmax);
                for (int i = 0; i < Lmax; ++i) {
                    // causal and PAD-key mask: keys j <= i with j < len
                    const int kmax = std::min(i, len - 1);
                    if (kmax < 0) { // row for a pad query with no valid key
                        att(i, 0) = S(1);
                        continue;
                    }
                    S mx = -std::numeric_limits<S>::infinity();
                    for (int j = 0; j <= kmax; ++j) {
                        const S s = qh.row(i).dot(kh.row(j)) * scale;
                        att(i, j) = s;
                        mx = std::max(mx, s);
                    }
                    S denom = S(0);
                    for (int j = 0; j <= kmax; ++j) {
                        att(i, j) = std::exp(att(i, j) - mx);
                        denom += att(i, j);
                    }
                    for (int j = 0; j <= kmax; ++j) att(i, j) /= denom;
                    L.ctx.block(base + i, h * hd, 1, hd).noalias() =
                        att.row(i).head(kmax + 1) * vh.topRows(kmax + 1);
                }
            }
        }
    }

    void attention_backward(const Batch& batch, const typename ForwardCache<S>::Layer& L,
                            const Mat& d_ctx, Mat& dq, Mat& dk, Mat& dv) const {
        const int d = cfg.d_model;
        const int hd = d / cfg.n_heads;
        const S scale = S(1) / S(std::sqrt(double(hd)));
        const int Lmax = batch.max_len;
        for (int b = 0; b < batch.n_seqs; ++b) {
            const int base = b * Lmax;
            const int len = batch.lengths[static_cast<std::size_t>(b)];
            for (int h = 0; h < cfg.n_heads; ++h) {
                auto qh = L.q.block(base, h * hd, Lmax, hd);
                auto kh = L.k.block(base, h * hd, Lmax, hd);
                auto vh = L.v.block(base, h * hd, Lmax, hd);
                auto dqh = dq.block(base, h * hd, Lmax, hd);
                auto dkh = dk.block(base, h * hd, Lmax, hd);
                auto dvh = dv.block(base, h * hd, Lmax, hd);
                const Mat& att = L.att[static_cast<std::size_t>(b * cfg.n_heads + h)];
                for (int i = 0; i < Lmax; ++i) {
                    const int kmax = std::min(i, len - 1);
                    if (kmax < 0) continue;
                    const auto dctx_row = d_ctx.block(base + i, h * hd, 1, hd);
                    // dP = dctx * V^T ; softmax backward ; dQ, dK
                    Eigen::Matrix<S, 1, Eigen::Dynamic> dp =
                        dctx_row * vh.topRows(kmax + 1).transpose();
                    dvh.topRows(kmax + 1).noalias() +=
                        att.row(i).head(kmax + 1).transpose() * dctx_row;
                    const S dot = dp.cwiseProduct(att.row(i).head(kmax + 1)).sum();
                    Eigen::Matrix<S, 1, Eigen::Dynamic> ds =
                        att.row(i).head(kmax + 1).cwiseProduct(
                            (dp.array() - dot).matrix());
                    dqh.row(i).noalias() += ds * kh.topRows(kmax + 1) * scale;
                    dkh.topRows(kmax + 1).noalias() += ds.transpose() * qh.row(i) * scale;
                }
            }
        }
    }

    void apply_dropout(Mat& x, bool train_mode, Rng* rng, std::vector<std::uint8_t>& mask) const {
        mask.clear();
        if (!train_mode || cfg.dropout_rate <= 0.0) return;
        if (!rng) throw std::invalid_argument("train-mode dropout requires an rng");
        const S keep = S(1.0 - cfg.dropout_rate);
        mask.resize(static_cast<std::size_t>(x.rows()) * static_cast<std::size_t>(x.cols()));
        std::size_t idx = 0;
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            for (Eigen::Index cc = 0; cc < x.cols(); ++cc, ++idx) {
                const bool kept = !rng->bernoulli(cfg.dropout_rate);
                mask[idx] = kept ? 1 : 0;
                x(r, cc) = kept ? x(r, cc) / keep : S(0);
            }
    }

    void dropout_backward(Mat& dx, const std::vector<std::uint8_t>& mask) const {
        if (mask.empty()) return;
        const S keep = S(1.0 - cfg.dropout_rate);
        std::size_t idx = 0;
        for (Eigen::Index r = 0; r < dx.rows(); ++r)
            for (Eigen::Index cc = 0; cc < dx.cols(); ++cc, ++idx)
                dx(r, cc) = mask[idx] ? dx(r, cc) / keep : S(0);
    }
};

using ModelF = TransformerLM<float>;
using ModelD = TransformerLM<double>;

// ---------------------------------------------------------------------------
// ts_trace
// ---------------------------------------------------------------------------

template <typename S>
inline TsTrace ts_trace(const TransformerLM<S>& model, const Sample& sample, Variant variant,
                        const Vocab& vocab) {
    const EncodedSequence enc =
        encode(sample, vocab, variant, true, static_cast<std::size_t>(model.cfg.max_seq_len));
    const Batch batch = make_batch(enc);
    const auto logits = model.forward(batch);
    TsTrace trace;
    trace.dialog_id = sample.dialog_id;
    trace.cu_index = sample.cu_index;
    trace.words = sample.current.words;
    trace.tags = sample.tags;
    trace.end_index = static_cast<int>(sample.current.words.size()) - 1;
    trace.probs.reserve(enc.cu_word_positions.size());
    for (auto pos : enc.cu_word_positions)
        trace.probs.push_back(canon6(TransformerLM<S>::ts_prob_at(logits, pos)));
    return trace;
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

inline constexpr char kCkptMagic[8] = {'R', 'C', 'T', 'C', 'K', 'P', 'T', '\0'};

namespace detail {

inline void write_u64le(std::ostream& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64le(std::istream& in) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        const int c = in.get();
        if (c == EOF) throw std::runtime_error("checkpoint truncated");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

class HashingStream {
public:
    explicit HashingStream(std::ostream& out) : out_(out) {}
    void write(const void* data, std::size_t n) {
        hash_.update(data, n);
        out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    }
    void u32(std::uint32_t v) {
        char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
        write(b, 4);
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            const char c = static_cast<char>((v >> (8 * i)) & 0xff);
            write(&c, 1);
        }
    }
    std::uint64_t digest() const { return hash_.digest(); }

private:
    std::ostream& out_;
    Fnv1a64 hash_;
};

} // namespace detail

inline void save_checkpoint(const ModelF& model, std::uint64_t vocab_hash,
                            const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    detail::HashingStream hs(out);
    hs.write(kCkptMagic, 8);
    hs.u32(kCheckpointFormatVersion);
    const auto& c = model.cfg;
    hs.u32(static_cast<std::uint32_t>(c.vocab_size));
    hs.u32(static_cast<std::uint32_t>(c.d_model));
    hs.u32(static_cast<std::uint32_t>(c.n_layers));
    hs.u32(static_cast<std::uint32_t>(c.n_heads));
    hs.u32(static_cast<std::uint32_t>(c.d_ff));
    hs.u32(static_cast<std::uint32_t>(c.max_seq_len));
    std::uint64_t drop_bits = 0;
    static_assert(sizeof(double) == 8);
    std::memcpy(&drop_bits, &c.dropout_rate, 8);
    hs.u64(drop_bits);
    hs.u64(c.seed);
    hs.u64(vocab_hash);
    hs.u32(static_cast<std::uint32_t>(model.blocks().size()));
    for (const auto& b : model.blocks()) {
        hs.u32(static_cast<std::uint32_t>(b.name.size()));
        hs.write(b.name.data(), b.name.size());
        hs.u32(static_cast<std::uint32_t>(b.rows));
        hs.u32(static_cast<std::uint32_t>(b.cols));
        const float* p = model.params.data() + b.offset;
        const std::size_t n = static_cast<std::size_t>(b.rows) * static_cast<std::size_t>(b.cols);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits = 0;
            std::memcpy(&bits, &p[i], 4);
            hs.u32(bits);
        }
    }
    detail::write_u64le(out, hs.digest());
    if (!out) throw std::runtime_error("failed while writing checkpoint: " + path);
}

struct LoadedCheckpoint {
    ModelF model;
    std::uint64_t vocab_hash = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path,
                                        const std::uint64_t* expected_vocab_hash = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 + 8) throw std::runtime_error("checkpoint truncated: " + path);

    const std::string payload = bytes.substr(0, bytes.size() - 8);
    std::uint64_t stored = 0;
    for (int i = 0; i < 8; ++i)
        stored |= static_cast<std::uint64_t>(
                      static_cast<unsigned char>(bytes[bytes.size() - 8 + static_cast<std::size_t>(i)]))
                  << (8 * i);
    if (fnv1a64(payload) != stored)
        throw std::runtime_error("checkpoint checksum mismatch (corrupted or truncated): " + path);

    std::size_t off = 0;
    auto need = [&](std::size_t n) {
        if (off + n > payload.size()) throw std::runtime_error("checkpoint truncated: " + path);
    };
    auto ru32 = [&]() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[off + static_cast<std::size_t>(i)]))
                 << (8 * i);
        off += 4;
        return v;
    };
    auto ru64 = [&]() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[off + static_cast<std::size_t>(i)]))
                 << (8 * i);
        off += 8;
        return v;
    };

    need(8);
    if (payload.compare(0, 8, kCkptMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    off = 8;
    const auto version = ru32();
    if (version != kCheckpointFormatVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(ru32());
    cfg.d_model = static_cast<int>(ru32());
    cfg.n_layers = static_cast<int>(ru32());
    cfg.n_heads = static_cast<int>(ru32());
    cfg.d_ff = static_cast<int>(ru32());
    cfg.max_seq_len = static_cast<int>(ru32());
    const std::uint64_t drop_bits = ru64();
    std::memcpy(&cfg.dropout_rate, &drop_bits, 8);
    cfg.seed = ru64();

    LoadedCheckpoint lc{ModelF::init(cfg), ru64()};
    if (expected_vocab_hash && *expected_vocab_hash != lc.vocab_hash)
        throw std::runtime_error("checkpoint vocabulary hash " + hex64(lc.vocab_hash) +
                                 " does not match expected " + hex64(*expected_vocab_hash));

    const auto n_blocks = ru32();
    if (n_blocks != lc.model.blocks().size())
        throw std::runtime_error("checkpoint block count mismatch");
    for (const auto& b : lc.model.blocks()) {
        const auto name_len = ru32();
        need(name_len);
        const std::string name = payload.substr(off, name_len);
        off += name_len;
        const auto rows = ru32();
        const auto cols = ru32();
        if (name != b.name || static_cast<int>(rows) != b.rows || static_cast<int>(cols) != b.cols)
            throw std::runtime_error("checkpoint block " + name + " does not match layout");
        float* p = lc.model.params.data() + b.offset;
        const std::size_t n = static_cast<std::size_t>(b.rows) * static_cast<std::size_t>(b.cols);
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t bits = ru32();
            std::memcpy(&p[i], &bits, 4);
        }
    }
    if (off != payload.size()) throw std::runtime_error("checkpoint has trailing bytes: " + path);
    return lc;
}

// ---------------------------------------------------------------------------
// finite-difference gradient check (64-bit)
// ---------------------------------------------------------------------------

// Central differences against the analytic gradient over every parameter.
// Relative error uses the guarded denominator max(|a|+|n|, 1e-4).
inline double grad_check(const ModelConfig& cfg, const EncodedSequence& seq,
                         double step = 1e-4) {
    ModelD model = ModelD::init(cfg);
    const Batch batch = make_batch(seq);
    const auto analytic = model.loss_and_grad(batch, false, nullptr);

    double max_rel = 0.0;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const double orig = model.params[i];
        model.params[i] = orig + step;
        const double lp = model.eval_loss(batch);
        model.params[i] = orig - step;
        const double lm = model.eval_loss(batch);
        model.params[i] = orig;
        if (!std::isfinite(lp) || !std::isfinite(lm))
            throw std::runtime_error("non-finite loss during gradient check");
        const double numeric = (lp - lm) / (2.0 * step);
        const double a = analytic.grads[i];
        const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-4);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

} // namespace rcturn
