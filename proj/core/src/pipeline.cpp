#include "cvl/pipeline.hpp"

#include <cmath>

#include "cvl/ops.hpp"
#include "cvl/rng.hpp"

namespace cvl {

void projector_config::validate() const {
    check(in_dim > 0, "projector_config: in_dim must be positive");
    check(out_dim > 0, "projector_config: out_dim must be positive");
    check(hidden_dim >= 0, "projector_config: hidden_dim must be non-negative");
}

template <typename T>
projector_state<T> build_projector(const projector_config & cfg, uint64_t seed) {
    cfg.validate();
    projector_state<T> st;
    st.cfg = cfg;
    rng r(seed);

    // fan-in scaled init keeps the projector's output at unit order for
    // any width
    tensor<T> w1({cfg.hidden(), cfg.in_dim});
    r.fill_trunc_normal(w1, 1.0 / std::sqrt(static_cast<double>(cfg.in_dim)));
    st.params.add("fc1.weight", std::move(w1));
    st.params.add("fc1.bias", tensor<T>({cfg.hidden()}));
    tensor<T> w2({cfg.out_dim, cfg.hidden()});
    r.fill_trunc_normal(w2, 1.0 / std::sqrt(static_cast<double>(cfg.hidden())));
    st.params.add("fc2.weight", std::move(w2));
    st.params.add("fc2.bias", tensor<T>({cfg.out_dim}));
    return st;
}

template <typename T>
tensor<T> project(const projector_state<T> & proj, const tensor<T> & tokens) {
    check(tokens.rank() == 3, "project: tokens must be [B,N,C], got " + shape_str(tokens.shape));
    check(tokens.size(2) == proj.cfg.in_dim,
          "project: token dim " + std::to_string(tokens.size(2)) + " does not match in_dim " +
              std::to_string(proj.cfg.in_dim));
    const tensor<T> & b1 = proj.params.at("fc1.bias");
    const tensor<T> & b2 = proj.params.at("fc2.bias");
    tensor<T> h = ops::linear(tokens, proj.params.at("fc1.weight"), &b1);
    h = ops::gelu(h);
    return ops::linear(h, proj.params.at("fc2.weight"), &b2);
}

template <typename T>
typename tape<T>::id project_on_tape(const projector_state<T> & proj, tape<T> & tp,
                                     tape_binding<T> & bind, typename tape<T>::id tokens) {
    const tensor<T> & tv = tp.val(tokens);
    check(tv.rank() == 3, "project: tokens must be [B,N,C], got " + shape_str(tv.shape));
    check(tv.size(2) == proj.cfg.in_dim,
          "project: token dim " + std::to_string(tv.size(2)) + " does not match in_dim " +
              std::to_string(proj.cfg.in_dim));
    auto h = tp.linear(tokens, bind.use("fc1.weight"), bind.use("fc1.bias"));
    h = tp.gelu(h);
    return tp.linear(h, bind.use("fc2.weight"), bind.use("fc2.bias"));
}

void toy_lm_config::validate() const {
    check(vocab_size > 0, "toy_lm_config: vocab_size must be positive");
    check(embed_dim > 0, "toy_lm_config: embed_dim must be positive");
    check(num_layers > 0, "toy_lm_config: num_layers must be positive");
    check(heads > 0, "toy_lm_config: heads must be positive");
    check(embed_dim % heads == 0, "toy_lm_config: embed_dim " + std::to_string(embed_dim) +
                                      " not divisible by heads " + std::to_string(heads));
    check(max_seq > 0, "toy_lm_config: max_seq must be positive");
}

template <typename T>
toy_lm_state<T> build_toy_lm(const toy_lm_config & cfg, uint64_t seed) {
    cfg.validate();
    toy_lm_state<T> st;
    st.cfg = cfg;
    rng r(seed);

    // matrices at 1/sqrt(fan_in) so every path through the frozen block
    // carries signal at unit order
    auto weight = [&](const std::string & name, std::vector<int64_t> shape) {
        const double stddev = 1.0 / std::sqrt(static_cast<double>(shape.back()));
        tensor<T> t(std::move(shape));
        r.fill_trunc_normal(t, stddev);
        st.params.add(name, std::move(t));
    };
    auto zeros = [&](const std::string & name, std::vector<int64_t> shape) {
        st.params.add(name, tensor<T>(std::move(shape)));
    };
    auto ones = [&](const std::string & name, int64_t n) {
        tensor<T> t({n});
        t.fill(T(1));
        st.params.add(name, std::move(t));
    };

    const int64_t d = cfg.embed_dim;
    // Tied-head compromise: rows of norm ~0.6 leave the initial logits
    // near zero (uniform next-token loss ~ ln V) while a normalized
    // hidden state can still reach logit margins of ~0.6*sqrt(D).
    const double embed_std = 0.6 / std::sqrt(static_cast<double>(d));
    {
        tensor<T> t({cfg.vocab_size, d});
        r.fill_trunc_normal(t, embed_std);
        st.params.add("embed.weight", std::move(t));
    }
    {
        tensor<T> t({cfg.max_seq, d});
        r.fill_trunc_normal(t, embed_std);
        st.params.add("pos.weight", std::move(t));
    }
    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        ones(pre + "ln1.gamma", d);
        zeros(pre + "ln1.beta", {d});
        for (const char * proj : {"wq", "wk", "wv", "wo"}) {
            weight(pre + "attn." + std::string(proj) + ".weight", {d, d});
            zeros(pre + "attn." + std::string(proj) + ".bias", {d});
        }
        ones(pre + "ln2.gamma", d);
        zeros(pre + "ln2.beta", {d});
        weight(pre + "mlp.fc1.weight", {4 * d, d});
        zeros(pre + "mlp.fc1.bias", {4 * d});
        weight(pre + "mlp.fc2.weight", {d, 4 * d});
        zeros(pre + "mlp.fc2.bias", {d});
    }
    ones("final_norm.gamma", d);
    zeros("final_norm.beta", {d});
    return st;
}

template <typename T>
typename tape<T>::id forward_lm_on_tape(const toy_lm_state<T> & lm, tape<T> & tp,
                                        tape_binding<T> & bind, typename tape<T>::id visual_emb,
                                        const std::vector<std::vector<int>> & text_ids) {
    using id = typename tape<T>::id;
    const toy_lm_config & cfg = lm.cfg;
    const tensor<T> & vis = tp.val(visual_emb);
    check(vis.rank() == 3, "forward_lm: visual_emb must be [B,N,D], got " + shape_str(vis.shape));
    check(vis.size(2) == cfg.embed_dim,
          "forward_lm: visual dim " + std::to_string(vis.size(2)) + " does not match embed_dim " +
              std::to_string(cfg.embed_dim));
    const int64_t bsz = vis.size(0);
    const int64_t n_vis = vis.size(1);
    check(static_cast<int64_t>(text_ids.size()) == bsz,
          "forward_lm: " + std::to_string(text_ids.size()) + " text rows for batch " +
              std::to_string(bsz));
    const int64_t t_text = text_ids.empty() ? 0 : static_cast<int64_t>(text_ids[0].size());
    for (const auto & row : text_ids) {
        check(static_cast<int64_t>(row.size()) == t_text,
              "forward_lm: ragged text batch (equal lengths required)");
    }
    const int64_t t_total = n_vis + t_text;
    check(t_total <= cfg.max_seq, "forward_lm: sequence length " + std::to_string(t_total) +
                                      " overflows max_seq " + std::to_string(cfg.max_seq));

    id x = visual_emb;
    if (t_text > 0) {
        std::vector<int> flat;
        flat.reserve(static_cast<size_t>(bsz * t_text));
        for (const auto & row : text_ids) {
            flat.insert(flat.end(), row.begin(), row.end());
        }
        const id text_emb = tp.embedding(bind.use("embed.weight"), flat, {bsz, t_text});
        x = tp.concat_dim1(x, text_emb);
    }
    x = tp.add_rows(x, bind.use("pos.weight"));

    const int64_t d = cfg.embed_dim;
    const int64_t h = cfg.heads;
    const int64_t dh = cfg.head_dim();

    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";

        id hn = tp.layer_norm_last(x, bind.use(pre + "ln1.gamma"), bind.use(pre + "ln1.beta"),
                                   cfg.norm_eps);
        auto head_split = [&](id v) {
            // [B,T,D] -> [B,H,T,dh]
            v = tp.reshape(v, {bsz, t_total, h, dh});
            return tp.permute(v, {0, 2, 1, 3});
        };
        id q = head_split(tp.linear(hn, bind.use(pre + "attn.wq.weight"),
                                    bind.use(pre + "attn.wq.bias")));
        id k = head_split(tp.linear(hn, bind.use(pre + "attn.wk.weight"),
                                    bind.use(pre + "attn.wk.bias")));
        id v = head_split(tp.linear(hn, bind.use(pre + "attn.wv.weight"),
                                    bind.use(pre + "attn.wv.bias")));

        id scores = tp.matmul(q, tp.permute(k, {0, 1, 3, 2}));
        scores = tp.scalar_mul(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
        id attn = tp.causal_softmax(scores);
        id ctx = tp.matmul(attn, v);                 // [B,H,T,dh]
        ctx = tp.permute(ctx, {0, 2, 1, 3});         // [B,T,H,dh]
        ctx = tp.reshape(ctx, {bsz, t_total, d});
        id o = tp.linear(ctx, bind.use(pre + "attn.wo.weight"), bind.use(pre + "attn.wo.bias"));
        x = tp.add(x, o);

        id hn2 = tp.layer_norm_last(x, bind.use(pre + "ln2.gamma"), bind.use(pre + "ln2.beta"),
                                    cfg.norm_eps);
        id m = tp.linear(hn2, bind.use(pre + "mlp.fc1.weight"), bind.use(pre + "mlp.fc1.bias"));
        m = tp.gelu(m);
        m = tp.linear(m, bind.use(pre + "mlp.fc2.weight"), bind.use(pre + "mlp.fc2.bias"));
        x = tp.add(x, m);
    }

    x = tp.layer_norm_last(x, bind.use("final_norm.gamma"), bind.use("final_norm.beta"),
                           cfg.norm_eps);

    // tied output head: logits = x @ embed^T
    id flat = tp.reshape(x, {bsz * t_total, d});
    id head = tp.permute(bind.use("embed.weight"), {1, 0});
    id logits = tp.matmul(flat, head);
    return tp.reshape(logits, {bsz, t_total, cfg.vocab_size});
}

template <typename T>
vlm_model<T> build_vlm(const encoder_config & enc_cfg, const projector_config & proj_cfg,
                       const toy_lm_config & lm_cfg, uint64_t seed) {
    check(proj_cfg.in_dim == enc_cfg.channels.back(),
          "build_vlm: projector in_dim " + std::to_string(proj_cfg.in_dim) +
              " does not match encoder output channels " +
              std::to_string(enc_cfg.channels.back()));
    check(proj_cfg.out_dim == lm_cfg.embed_dim,
          "build_vlm: projector out_dim " + std::to_string(proj_cfg.out_dim) +
              " does not match LM embed_dim " + std::to_string(lm_cfg.embed_dim));
    vlm_model<T> m{
        build_encoder<T>(enc_cfg, mix_seed(seed, 1)),
        build_projector<T>(proj_cfg, mix_seed(seed, 2)),
        build_toy_lm<T>(lm_cfg, mix_seed(seed, 3)),
    };
    return m;
}

template <typename T>
lm_loss_result<T> lm_loss_on_tape(tape<T> & tp, vlm_model<T> & model, vlm_bindings<T> & binds,
                                  const multimodal_batch<T> & batch) {
    using id = typename tape<T>::id;
    check(!batch.empty(), "lm_loss: empty batch");

    std::vector<id> losses;
    std::vector<int64_t> counts;
    int64_t total_unmasked = 0;

    for (size_t si = 0; si < batch.size(); ++si) {
        const multimodal_sample<T> & s = batch[si];
        check(s.image.rank() == 4 && s.image.size(0) == 1,
              "lm_loss: sample image must be [1,3,H,W], got " + shape_str(s.image.shape));

        const id img = tp.leaf(s.image);
        const taped_tokens<T> enc = encode_on_tape(model.encoder, tp, binds.encoder, img);
        const id proj = project_on_tape(model.projector, tp, binds.projector, enc.node);
        const int64_t n_vis = tp.val(proj).size(1);

        const int64_t t_total = n_vis + static_cast<int64_t>(s.text.size());
        check(static_cast<int64_t>(s.loss_mask.size()) == t_total,
              "lm_loss: sample " + std::to_string(si) + " loss_mask length " +
                  std::to_string(s.loss_mask.size()) + " != visual " + std::to_string(n_vis) +
                  " + text " + std::to_string(s.text.size()));
        for (int64_t i = 0; i < n_vis; ++i) {
            check(!s.loss_mask[static_cast<size_t>(i)],
                  "lm_loss: sample " + std::to_string(si) +
                      " marks a visual prefix position as a loss target");
        }

        const id logits3 = forward_lm_on_tape(model.lm, tp, binds.lm, proj, {s.text});
        const id logits = tp.reshape(logits3, {t_total, int64_t(model.lm.cfg.vocab_size)});

        // Row i is scored against the token at position i+1 when that
        // position is marked in the sample mask.
        std::vector<int> targets(static_cast<size_t>(t_total), 0);
        std::vector<bool> row_mask(static_cast<size_t>(t_total), false);
        for (int64_t pos = n_vis; pos < t_total; ++pos) {
            if (s.loss_mask[static_cast<size_t>(pos)] && pos > 0) {
                row_mask[static_cast<size_t>(pos - 1)] = true;
                targets[static_cast<size_t>(pos - 1)] = s.text[static_cast<size_t>(pos - n_vis)];
            }
        }

        const id loss = tp.softmax_cross_entropy(logits, targets, row_mask);

        int64_t cnt = 0;
        for (bool b : row_mask) {
            cnt += b ? 1 : 0;
        }
        losses.push_back(loss);
        counts.push_back(cnt);
        total_unmasked += cnt;
    }

    lm_loss_result<T> res;
    res.unmasked = total_unmasked;
    if (total_unmasked == 0) {
        tp.warnings().push_back("lm_loss: every position in the batch is masked, loss is 0");
        res.node = tp.leaf(tensor<T>::scalar(T(0)));
        res.value = 0.0;
        res.all_masked = true;
        return res;
    }

    std::vector<double> coeffs;
    coeffs.reserve(losses.size());
    for (int64_t c : counts) {
        coeffs.push_back(static_cast<double>(c) / static_cast<double>(total_unmasked));
    }
    res.node = tp.affine_combine(losses, coeffs);
    res.value = static_cast<double>(tp.val(res.node)[0]);
    res.all_masked = false;
    return res;
}

// ---------------------------------------------------------------------

template struct projector_state<float>;
template struct projector_state<double>;
template struct toy_lm_state<float>;
template struct toy_lm_state<double>;
template struct vlm_model<float>;
template struct vlm_model<double>;

template projector_state<float> build_projector<float>(const projector_config &, uint64_t);
template projector_state<double> build_projector<double>(const projector_config &, uint64_t);
template tensor<float> project<float>(const projector_state<float> &, const tensor<float> &);
template tensor<double> project<double>(const projector_state<double> &, const tensor<double> &);
template tape<float>::id project_on_tape<float>(const projector_state<float> &, tape<float> &,
                                                tape_binding<float> &, tape<float>::id);
template tape<double>::id project_on_tape<double>(const projector_state<double> &, tape<double> &,
                                                  tape_binding<double> &, tape<double>::id);
template toy_lm_state<float> build_toy_lm<float>(const toy_lm_config &, uint64_t);
template toy_lm_state<double> build_toy_lm<double>(const toy_lm_config &, uint64_t);
template tape<float>::id forward_lm_on_tape<float>(const toy_lm_state<float> &, tape<float> &,
                                                   tape_binding<float> &, tape<float>::id,
                                                   const std::vector<std::vector<int>> &);
template tape<double>::id forward_lm_on_tape<double>(const toy_lm_state<double> &, tape<double> &,
                                                     tape_binding<double> &, tape<double>::id,
                                                     const std::vector<std::vector<int>> &);
template vlm_model<float> build_vlm<float>(const encoder_config &, const projector_config &,
                                           const toy_lm_config &, uint64_t);
template vlm_model<double> build_vlm<double>(const encoder_config &, const projector_config &,
                                             const toy_lm_config &, uint64_t);
template lm_loss_result<float> lm_loss_on_tape<float>(tape<float> &, vlm_model<float> &,
                                                      vlm_bindings<float> &,
                                                      const multimodal_batch<float> &);
template lm_loss_result<double> lm_loss_on_tape<double>(tape<double> &, vlm_model<double> &,
                                                        vlm_bindings<double> &,
                                                        const multimodal_batch<double> &);

}  // namespace cvl
