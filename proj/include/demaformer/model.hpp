#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "demaformer/dema.hpp"

namespace demaformer {

struct ModelConfig {
    std::size_t d = 32;    // shared model dimension
    std::size_t d_k = 256; // key-space dimension
    std::size_t n_enc = 2; // encoder layers
    std::size_t n_dec = 2; // decoder layers
    std::size_t d_v = 40;  // raw video feature dimension
    std::size_t d_q = 20;  // raw text feature dimension
    std::size_t d_a = 16;  // raw audio feature dimension
    std::size_t top_moments_test = 10;  // moments returned at test time

    void validate() const;
};

struct AblationFlags {
    bool no_damping = false;      // pin delta == 1 (plain EMA)
    bool no_dema = false;         // plain softmax attention blocks
    bool no_ebm = false;          // lambda_nll forced to 0
    bool offset_variant = false;  // main-text offset residual in the matching loss
};

// Per-position head outputs over the L_v video moments, each [L_v x 1].
// Center and width are squashed into [0,1]; salience and offset stay linear.
struct HeadOutputs {
    Tensor salience;
    Tensor center;
    Tensor offset;
    Tensor width;

    std::size_t l_video() const { return salience.rows(); }
};

// A scored candidate moment in normalized [0,1] video time.
struct Span {
    double start = 0.0;
    double end = 0.0;
    double score = 0.0;
};

// One encoder/decoder layer: DEMA attention followed by two learnable
// normalizations around a ReLU residual:
//   H = Norm(Block(X));  X_next = Norm(ReLU(H) + H)
struct LayerParams {
    DemaAttentionParams block;
    Tensor norm1_gain, norm1_shift;
    Tensor norm2_gain, norm2_shift;

    static LayerParams init(std::size_t d, std::size_t d_k, Rng& rng, bool use_dema,
                            bool damping);
    Tensor apply(const Tensor& x) const;
    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const;
};

// Audio-dependent video fusion: F' = F + softmax(A F^T / sqrt(d)) F.
Tensor audio_fuse(const Tensor& f, const Tensor& a_proj);

std::vector<Span> spans_from_heads(const HeadOutputs& heads);
std::vector<Span> top_moments(std::vector<Span> spans, std::size_t l_m);

// The DemaFormer network: input projections to the shared dimension, audio
// fusion, encoder over [F'; T], decoder over the first L_v encoder outputs,
// and four per-position prediction heads.
class Model {
public:
    Model(const ModelConfig& cfg, const AblationFlags& ablations, std::uint64_t seed);

    struct ForwardResult {
        Tensor encoder_out;  // [(L_v + L_q) x d]
        Tensor decoder_out;  // [L_v x d]
        HeadOutputs heads;
        std::size_t l_video = 0;
        std::size_t l_query = 0;
    };

    ForwardResult forward(const Tensor& video, const Tensor& audio, const Tensor& text) const;

    Tensor encode(const Tensor& fused_video, const Tensor& text_proj) const;
    Tensor decode(const Tensor& encoder_out, std::size_t l_video) const;
    HeadOutputs predict_heads(const Tensor& decoder_out) const;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
    void zero_grad() const;

    const ModelConfig& config() const { return cfg_; }
    const AblationFlags& ablations() const { return ablations_; }
    const LinearParams& salience_head() const { return head_salience_; }

    // Test access: layer stacks are mutable so suites can inject
    // degenerate shapes (empty stacks, forced gates).
    std::vector<LayerParams>& encoder_layers() { return encoder_; }
    std::vector<LayerParams>& decoder_layers() { return decoder_; }

private:
    ModelConfig cfg_;
    AblationFlags ablations_;
    LinearParams video_in_, audio_in_, text_in_;
    std::vector<LayerParams> encoder_;
    std::vector<LayerParams> decoder_;
    LinearParams head_salience_, head_center_, head_offset_, head_width_;
};

}  // namespace demaformer
