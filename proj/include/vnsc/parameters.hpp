#ifndef VNSC_PARAMETERS_HPP
#define VNSC_PARAMETERS_HPP

#include <cmath>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vnsc/autograd.hpp"
#include "vnsc/rng.hpp"

namespace vnsc {

template <typename S>
struct Parameter {
    std::string name;
    Var<S> var;
    bool trainable = true;
};

/// Named tensors as stored in a "VNSCPARM" file (f32 payload).
using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

inline constexpr char parameter_magic[8] = {'V', 'N', 'S', 'C', 'P', 'A', 'R', 'M'};
inline constexpr std::uint32_t parameter_format_version = 1;

/// Little-endian: magic, version u32, count u32, then per entry
/// name length u16, UTF-8 name, rank u8, extents u32 each, raw f32 data.
void write_parameter_file(std::ostream& os, const NamedTensors& tensors);
NamedTensors read_parameter_file(std::istream& is);
void write_parameter_file(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_parameter_file(const std::filesystem::path& path);

/// Owns every tensor of a model, trainable weights and persistent buffers
/// (norm running statistics, codebooks) alike, in registration order.
template <typename S>
class ParameterStore {
public:
    Var<S> add(const std::string& name, Tensor<S> init, bool trainable = true) {
        if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
        index_.emplace(name, params_.size());
        params_.push_back({name, Var<S>(std::move(init), trainable), trainable});
        return params_.back().var;
    }

    /// Uniform in +-sqrt(1/fan_in).
    Var<S> add_uniform(const std::string& name, Shape shape, Index fan_in, Rng& rng) {
        const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
        return add(name, rng.uniform_tensor<S>(std::move(shape), -bound, bound));
    }

    bool contains(const std::string& name) const { return index_.contains(name); }

    const Var<S>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return params_[it->second].var;
    }

    const std::vector<Parameter<S>>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    Index scalar_count(bool trainable_only = true) const {
        Index n = 0;
        for (const auto& p : params_)
            if (!trainable_only || p.trainable) n += p.var.value().size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.var.zero_grad();
    }

    NamedTensors export_tensors() const {
        NamedTensors out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.emplace_back(p.name, p.var.value().template cast<float>());
        return out;
    }

    /// Strict import: names and shapes must match the registered set exactly.
    void import_tensors(const NamedTensors& tensors) {
        if (tensors.size() != params_.size()) {
            throw FormatError("parameter count mismatch: file has " + std::to_string(tensors.size()) +
                              ", model expects " + std::to_string(params_.size()));
        }
        for (const auto& [name, t] : tensors) {
            auto it = index_.find(name);
            if (it == index_.end()) throw FormatError("unexpected parameter in file: " + name);
            auto& var = params_[it->second].var;
            if (var.shape() != t.shape()) {
                throw FormatError("shape mismatch for " + name + ": file " + shape_string(t.shape()) + ", model " +
                                  shape_string(var.shape()));
            }
            var.mutable_value() = t.template cast<S>();
        }
    }

    void save(const std::filesystem::path& path) const { write_parameter_file(path, export_tensors()); }
    void load(const std::filesystem::path& path) { import_tensors(read_parameter_file(path)); }

    template <typename T>
    void copy_values_from(const ParameterStore<T>& other) {
        for (const auto& p : other.all()) {
            Var<S> mine = get(p.name);
            mine.mutable_value() = p.var.value().template cast<S>();
        }
    }

private:
    std::vector<Parameter<S>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace vnsc

#endif // VNSC_PARAMETERS_HPP
