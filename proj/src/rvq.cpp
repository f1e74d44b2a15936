#include "vnsc/rvq.hpp"

#include <limits>

namespace vnsc {

Index bits_per_index(Index entries) {
    if (entries < 1) throw ConfigError("codebook must have at least one entry");
    Index bits = 0;
    while ((Index(1) << bits) < entries) ++bits;
    return std::max<Index>(bits, 1);
}

Index payload_bits(const RvqConfig& cfg, Index latent_frames) {
    return latent_frames * cfg.stages * bits_per_index(cfg.entries);
}

namespace {

template <typename S>
void check_books(const std::vector<Tensor<S>>& books, Index dim) {
    if (books.empty()) throw ConfigError("RVQ needs at least one stage");
    for (const auto& b : books) {
        if (b.empty() || b.rank() != 2) throw ConfigError("empty or malformed codebook");
        if (b.dim(1) != dim) {
            throw ConfigError("codebook dim " + std::to_string(b.dim(1)) + " does not match latent dim " +
                              std::to_string(dim));
        }
    }
}

// Direct ||c - r||^2 with a fixed accumulation order, so identical codewords
// score identically and ties resolve to the lowest index. (A GEMM of the
// expanded form rounds rows differently depending on their position.)
template <typename S>
double squared_distance(const S* c, const double* r, Index dim) {
    double acc[4] = {0.0, 0.0, 0.0, 0.0};
    Index j = 0;
    for (; j + 4 <= dim; j += 4)
        for (int l = 0; l < 4; ++l) {
            const double diff = static_cast<double>(c[j + l]) - r[j + l];
            acc[l] += diff * diff;
        }
    for (; j < dim; ++j) {
        const double diff = static_cast<double>(c[j]) - r[j];
        acc[0] += diff * diff;
    }
    return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

} // namespace

template <typename S>
RvqResult<S> rvq_quantize(const Tensor<S>& latent, const std::vector<Tensor<S>>& books) {
    if (latent.rank() != 2) throw ConfigError("RVQ expects a [D, F] latent");
    const Index dim = latent.dim(0), frames = latent.dim(1);
    check_books(books, dim);

    RvqResult<S> out;
    out.indices = CodeIndices(static_cast<Index>(books.size()), frames);
    out.quantized = Tensor<S>(latent.shape());
    auto quantized = out.quantized.matrix();
    RowMatrix<S> residual = latent.matrix();

    for (std::size_t q = 0; q < books.size(); ++q) {
        const auto book = books[q].matrix();
        Index zero_row = -1;
        for (Index k = 0; k < book.rows() && zero_row < 0; ++k) {
            if ((book.row(k).array() == S(0)).all()) zero_row = k;
        }
        double energy = 0.0;
        Eigen::VectorXd r(dim);
        for (Index f = 0; f < frames; ++f) {
            r = residual.col(f).template cast<double>();
            Index best = 0;
            double best_d = squared_distance(book.row(0).data(), r.data(), dim);
            for (Index k = 1; k < book.rows(); ++k) {
                const double d = squared_distance(book.row(k).data(), r.data(), dim);
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            Vector<S> next = residual.col(f) - book.row(best).transpose();
            double e = next.template cast<double>().squaredNorm();
            // A near-tie can round the chosen residual above the current one;
            // fall back to the zero codeword when the stage has one.
            if (zero_row >= 0 && e > residual.col(f).template cast<double>().squaredNorm()) {
                best = zero_row;
                next = residual.col(f);
                e = next.template cast<double>().squaredNorm();
            }
            out.indices.at(static_cast<Index>(q), f) = static_cast<std::uint32_t>(best);
            quantized.col(f) += book.row(best).transpose();
            residual.col(f) = next;
            energy += e;
        }
        out.residual_energies.push_back(energy);
    }
    return out;
}

template <typename S>
Tensor<S> rvq_dequantize(const CodeIndices& indices, const std::vector<Tensor<S>>& books) {
    if (books.empty()) throw ConfigError("RVQ needs at least one stage");
    if (indices.stages != static_cast<Index>(books.size())) {
        throw ConfigError("index grid has " + std::to_string(indices.stages) + " stages, model has " +
                          std::to_string(books.size()));
    }
    const Index dim = books.front().dim(1);
    check_books(books, dim);
    Tensor<S> out({dim, std::max<Index>(indices.frames, 1)});
    auto m = out.matrix();
    for (Index q = 0; q < indices.stages; ++q) {
        const auto book = books[q].matrix();
        for (Index f = 0; f < indices.frames; ++f) {
            const Index k = indices.at(q, f);
            if (k >= book.rows()) throw FormatError("codeword index " + std::to_string(k) + " out of range");
            m.col(f) += book.row(k).transpose();
        }
    }
    return out;
}

template <typename S>
Var<S> quantization_loss(const Var<S>& latent, const Tensor<S>& quantized) {
    return mse_loss(latent, constant(quantized));
}

template <typename S>
void codebook_update_ema(Tensor<S>& book, Tensor<S>& counts, Tensor<S>& sums, const Tensor<S>& vectors,
                         const std::uint32_t* assignment, double decay, double dead_threshold, Rng& rng,
                         Index pinned) {
    const Index k_total = book.dim(0), dim = book.dim(1), frames = vectors.dim(1);
    Eigen::VectorXd n = Eigen::VectorXd::Zero(k_total);
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(k_total, dim);
    const auto v = vectors.matrix();
    for (Index f = 0; f < frames; ++f) {
        n[assignment[f]] += 1.0;
        acc.row(assignment[f]) += v.col(f).template cast<double>().transpose();
    }
    auto b = book.matrix();
    auto s = sums.matrix();
    for (Index k = pinned; k < k_total; ++k) {
        const double c = decay * counts[k] + (1.0 - decay) * n[k];
        counts[k] = static_cast<S>(c);
        s.row(k) = (decay * s.row(k).template cast<double>() + (1.0 - decay) * acc.row(k)).template cast<S>();
        if (c < dead_threshold) {
            const Index pick = rng.below(frames);
            b.row(k) = v.col(pick).transpose();
            s.row(k) = b.row(k);
            counts[k] = S(1);
        } else {
            b.row(k) = (s.row(k).template cast<double>() / std::max(c, 1e-12)).template cast<S>();
        }
    }
}

template <typename S>
void seed_codebook(Tensor<S>& book, const Tensor<S>& vectors, Rng& rng, Index pinned) {
    const Index k_total = book.dim(0), frames = vectors.dim(1);
    const Eigen::MatrixXd v = vectors.matrix().template cast<double>();
    auto b = book.matrix();
    Eigen::VectorXd d2 = Eigen::VectorXd::Constant(frames, std::numeric_limits<double>::infinity());
    const double scale = std::sqrt(v.squaredNorm() / static_cast<double>(std::max<Index>(v.size(), 1)));
    auto take = [&](Index k, Index f) {
        b.row(k) = v.col(f).transpose().template cast<S>();
        d2 = d2.cwiseMin((v.colwise() - v.col(f)).colwise().squaredNorm().transpose());
    };
    Index k = pinned;
    if (k < k_total) take(k++, rng.below(frames));
    for (; k < k_total; ++k) {
        const double total = d2.sum();
        if (!(total > 0.0)) break;
        double r = rng.uniform() * total;
        Index f = 0;
        for (; f < frames - 1; ++f) {
            r -= d2[f];
            if (r < 0.0) break;
        }
        while (d2[f] <= 0.0 && f > 0) --f; // never pick an already-covered vector
        take(k, f);
    }
    // Out of distinct vectors: jittered copies keep the codes distinct.
    for (; k < k_total; ++k) {
        const Index f = rng.below(frames);
        for (Index d = 0; d < b.cols(); ++d) b(k, d) = static_cast<S>(v(d, f) + 1e-2 * scale * rng.normal());
    }
}

template <typename S>
ResidualVQ<S>::ResidualVQ(const RvqConfig& cfg, ParameterStore<S>& store, const std::string& prefix, Rng& rng)
    : cfg_(cfg) {
    if (cfg.stages < 1 || cfg.entries < 1 || cfg.dim < 1) throw ConfigError("RVQ stages, entries and dim must be >= 1");
    if (cfg.stages > 1 && cfg.entries < 2) throw ConfigError("multi-stage RVQ needs at least two entries per stage");
    if (cfg.decay < 0.0 || cfg.decay >= 1.0) throw ConfigError("RVQ EMA decay must be in [0, 1)");
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    for (Index q = 0; q < cfg.stages; ++q) {
        const std::string base = prefix + ".stage" + std::to_string(q);
        Tensor<S> book = rng.uniform_tensor<S>({cfg.entries, cfg.dim}, -bound, bound);
        if (q > 0) book.matrix().row(0).setZero();
        Stage st;
        st.sums = store.add(base + ".ema_sum", book, false);
        st.book = store.add(base + ".codebook", std::move(book), false);
        st.counts = store.add(base + ".ema_count", Tensor<S>::constant({cfg.entries}, S(1)), false);
        stages_.push_back(st);
    }
    initialized_ = store.add(prefix + ".initialized", Tensor<S>({1}), false);
}

template <typename S>
std::vector<Tensor<S>> ResidualVQ<S>::codebooks() const {
    std::vector<Tensor<S>> out;
    out.reserve(stages_.size());
    for (const auto& st : stages_) out.push_back(st.book.value());
    return out;
}

template <typename S>
void ResidualVQ<S>::initialize(const Tensor<S>& latent, Rng& rng) {
    Tensor<S> residual = latent;
    for (std::size_t q = 0; q < stages_.size(); ++q) {
        auto& st = stages_[q];
        Tensor<S>& book = st.book.mutable_value();
        seed_codebook(book, residual, rng, q == 0 ? 0 : 1);
        st.sums.mutable_value() = book;
        st.counts.mutable_value().vec().setOnes();
        const auto r = rvq_quantize(residual, {book});
        residual.vec() -= r.quantized.vec();
    }
    initialized_.mutable_value()[0] = S(1);
}

template <typename S>
void ResidualVQ<S>::update(const Tensor<S>& latent, const RvqResult<S>& result, Rng& rng) {
    Tensor<S> residual = latent;
    for (std::size_t q = 0; q < stages_.size(); ++q) {
        auto& st = stages_[q];
        const auto* assignment = result.indices.values.data() + q * static_cast<std::size_t>(result.indices.frames);
        // residual before this stage's update, using the codewords that were selected
        Tensor<S> next = residual;
        const auto book = st.book.value().matrix();
        for (Index f = 0; f < residual.dim(1); ++f) next.matrix().col(f) -= book.row(assignment[f]).transpose();
        codebook_update_ema(st.book.mutable_value(), st.counts.mutable_value(), st.sums.mutable_value(), residual,
                            assignment, cfg_.decay, cfg_.dead_threshold, rng, q == 0 ? 0 : 1);
        residual = std::move(next);
    }
}

#define VNSC_INSTANTIATE_RVQ(S)                                                                                \
    template RvqResult<S> rvq_quantize<S>(const Tensor<S>&, const std::vector<Tensor<S>>&);                  \
    template Tensor<S> rvq_dequantize<S>(const CodeIndices&, const std::vector<Tensor<S>>&);                 \
    template Var<S> quantization_loss<S>(const Var<S>&, const Tensor<S>&);                                    \
    template void codebook_update_ema<S>(Tensor<S>&, Tensor<S>&, Tensor<S>&, const Tensor<S>&,               \
                                         const std::uint32_t*, double, double, Rng&, Index);                   \
    template void seed_codebook<S>(Tensor<S>&, const Tensor<S>&, Rng&, Index);                                \
    template class ResidualVQ<S>;

VNSC_INSTANTIATE_RVQ(float)
VNSC_INSTANTIATE_RVQ(double)

} // namespace vnsc
