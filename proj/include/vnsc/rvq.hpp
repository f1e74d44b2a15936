#ifndef VNSC_RVQ_HPP
#define VNSC_RVQ_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "vnsc/ops.hpp"
#include "vnsc/parameters.hpp"

namespace vnsc {

struct RvqConfig {
    Index stages = 4;
    Index entries = 1024;
    Index dim = 256;
    double decay = 0.99;
    double dead_threshold = 1e-3;
};

/// ceil(log2(entries)), at least 1.
Index bits_per_index(Index entries);
Index payload_bits(const RvqConfig& cfg, Index latent_frames);

/// Q x F grid of codeword indices, stored stage-major.
struct CodeIndices {
    Index stages = 0;
    Index frames = 0;
    std::vector<std::uint32_t> values;

    CodeIndices() = default;
    CodeIndices(Index q, Index f) : stages(q), frames(f), values(static_cast<std::size_t>(q * f), 0) {}
    std::uint32_t& at(Index q, Index f) { return values[static_cast<std::size_t>(q * frames + f)]; }
    std::uint32_t at(Index q, Index f) const { return values[static_cast<std::size_t>(q * frames + f)]; }
    bool operator==(const CodeIndices&) const = default;
};

template <typename S>
struct RvqResult {
    CodeIndices indices;
    Tensor<S> quantized;                  // [D, F], sum of the selected codewords
    std::vector<double> residual_energies; // squared norm of the residual after each stage
};

/// Greedy residual quantization of latent [D, F] against codebooks [K, D].
/// Each stage takes the nearest codeword (lowest index on ties).
template <typename S>
RvqResult<S> rvq_quantize(const Tensor<S>& latent, const std::vector<Tensor<S>>& books);

template <typename S>
Tensor<S> rvq_dequantize(const CodeIndices& indices, const std::vector<Tensor<S>>& books);

/// Commitment loss mean((latent - sg(quantized))^2).
template <typename S>
Var<S> quantization_loss(const Var<S>& latent, const Tensor<S>& quantized);

/// One EMA step on a single codebook. `vectors` [D, F] are the stage inputs,
/// `assignment[f]` their chosen codewords. Rows below `pinned` are left alone.
/// Codes whose count falls under the dead threshold are re-seeded from a
/// random input vector.
template <typename S>
void codebook_update_ema(Tensor<S>& book, Tensor<S>& counts, Tensor<S>& sums, const Tensor<S>& vectors,
                         const std::uint32_t* assignment, double decay, double dead_threshold, Rng& rng,
                         Index pinned = 0);

/// k-means++ style seeding of `book` [K, D] from `vectors` [D, F]. When there
/// are fewer distinct vectors than codes, the rest are jittered random picks.
template <typename S>
void seed_codebook(Tensor<S>& book, const Tensor<S>& vectors, Rng& rng, Index pinned = 0);

/// Codebooks registered as persistent (non-trainable) buffers of a model.
/// Stages after the first keep a zero codeword at index 0, so adding a stage
/// can never increase the residual.
template <typename S>
class ResidualVQ {
public:
    ResidualVQ(const RvqConfig& cfg, ParameterStore<S>& store, const std::string& prefix, Rng& rng);

    const RvqConfig& config() const { return cfg_; }
    std::vector<Tensor<S>> codebooks() const;
    bool initialized() const { return initialized_.value()[0] != S(0); }

    RvqResult<S> quantize(const Tensor<S>& latent) const { return rvq_quantize(latent, codebooks()); }
    Tensor<S> dequantize(const CodeIndices& idx) const { return rvq_dequantize(idx, codebooks()); }

    /// Seeds every stage from a batch of latents (stage q sees the residual of stages < q).
    void initialize(const Tensor<S>& latent, Rng& rng);
    void update(const Tensor<S>& latent, const RvqResult<S>& result, Rng& rng);

private:
    struct Stage {
        Var<S> book, counts, sums;
    };
    RvqConfig cfg_;
    std::vector<Stage> stages_;
    Var<S> initialized_;
};

} // namespace vnsc

#endif // VNSC_RVQ_HPP
