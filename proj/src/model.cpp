#include "demaformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace demaformer {

void ModelConfig::validate() const {
    DMF_CHECK(d >= 1 && d_k >= 1 && d_v >= 1 && d_q >= 1 && d_a >= 1,
              "model config: dimensions must be positive");
    DMF_CHECK(n_enc >= 1 && n_dec >= 1, "model config: layer counts must be positive");
    DMF_CHECK(top_moments_test >= 1, "model config: top_moments_test must be positive");
}

// Normalization affines stay fixed at identity: rows keep unit scale, which
// pins the representation magnitude the heads see. The unbounded salience
// objective would otherwise recruit the gains as a loss-sink and destroy the
// head sigmoids' operating range.
LayerParams LayerParams::init(std::size_t d, std::size_t d_k, Rng& rng, bool use_dema,
                              bool damping) {
    LayerParams p;
    p.block = DemaAttentionParams::init(d, d_k, rng, use_dema, damping);
    p.norm1_gain = Tensor({d}, 1.0);
    p.norm1_shift = Tensor({d}, 0.0);
    p.norm2_gain = Tensor({d}, 1.0);
    p.norm2_shift = Tensor({d}, 0.0);
    return p;
}

Tensor LayerParams::apply(const Tensor& x) const {
    Tensor h = layer_norm(dema_attention(x, block), norm1_gain, norm1_shift);
    return layer_norm(add(relu(h), h), norm2_gain, norm2_shift);
}

void LayerParams::collect(std::vector<std::pair<std::string, Tensor>>& out,
                          const std::string& prefix) const {
    block.collect(out, prefix + ".block");
}

Tensor audio_fuse(const Tensor& f, const Tensor& a_proj) {
    DMF_CHECK(f.ndim() == 2 && a_proj.ndim() == 2, "audio_fuse: 2-d inputs required");
    DMF_CHECK(f.rows() == a_proj.rows(), "audio_fuse: sequence length mismatch");
    DMF_CHECK(f.cols() == a_proj.cols(), "audio_fuse: dimension mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(f.cols()));
    Tensor attn = softmax_rows(affine(matmul_nt(a_proj, f), scale, 0.0));
    return add(f, matmul(attn, f));
}

std::vector<Span> spans_from_heads(const HeadOutputs& heads) {
    const std::size_t n = heads.l_video();
    std::vector<Span> spans(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double c = heads.center.at(i, 0);
        const double co = heads.offset.at(i, 0);
        const double w = heads.width.at(i, 0);
        spans[i].start = std::clamp(c + co - w / 2.0, 0.0, 1.0);
        spans[i].end = std::clamp(c + co + w / 2.0, 0.0, 1.0);
        spans[i].score = heads.salience.at(i, 0);
    }
    return spans;
}

std::vector<Span> top_moments(std::vector<Span> spans, std::size_t l_m) {
    DMF_CHECK(l_m >= 1, "top_moments: l_m must be positive");
    std::vector<std::size_t> order(spans.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (spans[a].score != spans[b].score) return spans[a].score > spans[b].score;
        if (spans[a].start != spans[b].start) return spans[a].start < spans[b].start;
        return a < b;
    });
    std::vector<Span> out;
    out.reserve(std::min(l_m, spans.size()));
    for (std::size_t i = 0; i < std::min(l_m, spans.size()); ++i) out.push_back(spans[order[i]]);
    return out;
}

Model::Model(const ModelConfig& cfg, const AblationFlags& ablations, std::uint64_t seed)
    : cfg_(cfg), ablations_(ablations) {
    Rng rng(seed);
    video_in_ = LinearParams::init(cfg.d_v, cfg.d, rng);
    audio_in_ = LinearParams::init(cfg.d_a, cfg.d, rng);
    text_in_ = LinearParams::init(cfg.d_q, cfg.d, rng);
    const bool use_dema = !ablations.no_dema;
    const bool damping = !ablations.no_damping;
    for (std::size_t i = 0; i < cfg.n_enc; ++i)
        encoder_.push_back(LayerParams::init(cfg.d, cfg.d_k, rng, use_dema, damping));
    for (std::size_t i = 0; i < cfg.n_dec; ++i)
        decoder_.push_back(LayerParams::init(cfg.d, cfg.d_k, rng, use_dema, damping));
    head_salience_ = LinearParams::init(cfg.d, 1, rng);
    head_center_ = LinearParams::init(cfg.d, 1, rng);
    head_offset_ = LinearParams::init(cfg.d, 1, rng);
    head_width_ = LinearParams::init(cfg.d, 1, rng);
}

Tensor Model::encode(const Tensor& fused_video, const Tensor& text_proj) const {
    DMF_CHECK(fused_video.cols() == cfg_.d && text_proj.cols() == cfg_.d,
              "encode: inputs must live in the model dimension");
    Tensor x = concat_rows(fused_video, text_proj);
    for (const LayerParams& layer : encoder_) x = layer.apply(x);
    return x;
}

Tensor Model::decode(const Tensor& encoder_out, std::size_t l_video) const {
    DMF_CHECK(l_video <= encoder_out.rows(), "decode: l_video exceeds encoder length");
    Tensor x = slice_rows(encoder_out, 0, l_video);
    for (const LayerParams& layer : decoder_) x = layer.apply(x);
    return x;
}

HeadOutputs Model::predict_heads(const Tensor& decoder_out) const {
    HeadOutputs h;
    h.salience = linear_forward(decoder_out, head_salience_);
    h.center = sigmoid(linear_forward(decoder_out, head_center_));
    h.offset = linear_forward(decoder_out, head_offset_);
    h.width = sigmoid(linear_forward(decoder_out, head_width_));
    return h;
}

Model::ForwardResult Model::forward(const Tensor& video, const Tensor& audio,
                                    const Tensor& text) const {
    DMF_CHECK(video.ndim() == 2 && audio.ndim() == 2 && text.ndim() == 2,
              "forward: 2-d feature matrices required");
    DMF_CHECK(video.rows() == audio.rows(), "forward: video/audio length mismatch");
    DMF_CHECK(video.cols() == cfg_.d_v, "forward: video feature dimension mismatch");
    DMF_CHECK(audio.cols() == cfg_.d_a, "forward: audio feature dimension mismatch");
    DMF_CHECK(text.cols() == cfg_.d_q, "forward: text feature dimension mismatch");

    ForwardResult r;
    r.l_video = video.rows();
    r.l_query = text.rows();
    Tensor f = linear_forward(video, video_in_);
    Tensor a = linear_forward(audio, audio_in_);
    Tensor t = linear_forward(text, text_in_);
    r.encoder_out = encode(audio_fuse(f, a), t);
    r.decoder_out = decode(r.encoder_out, r.l_video);
    r.heads = predict_heads(r.decoder_out);
    return r;
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto linear = [&](const std::string& name, const LinearParams& lp) {
        out.emplace_back(name + ".weight", lp.weight);
        out.emplace_back(name + ".bias", lp.bias);
    };
    linear("video_in", video_in_);
    linear("audio_in", audio_in_);
    linear("text_in", text_in_);
    for (std::size_t i = 0; i < encoder_.size(); ++i)
        encoder_[i].collect(out, "enc." + std::to_string(i));
    for (std::size_t i = 0; i < decoder_.size(); ++i)
        decoder_[i].collect(out, "dec." + std::to_string(i));
    linear("head.salience", head_salience_);
    linear("head.center", head_center_);
    linear("head.offset", head_offset_);
    linear("head.width", head_width_);
    return out;
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

void Model::zero_grad() const {
    for (Tensor t : parameters()) t.zero_grad();
}

}  // namespace demaformer
