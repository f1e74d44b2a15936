#include "vnsc/parameters.hpp"

#include <fstream>
#include <limits>

#include "vnsc/binary_io.hpp"

namespace vnsc {

void write_parameter_file(std::ostream& os, const NamedTensors& tensors) {
    os.write(parameter_magic, 8);
    io::write_le<std::uint32_t>(os, parameter_format_version);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ConfigError("parameter name too long");
        if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw ConfigError("tensor rank too large");
        io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
        for (Index e : t.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
        for (Index i = 0; i < t.size(); ++i) io::write_le<float>(os, t[i]);
    }
    if (!os) throw FormatError("failed writing parameter file");
}

NamedTensors read_parameter_file(std::istream& is) {
    io::expect_magic(is, parameter_magic, "VNSCPARM");
    const auto version = io::read_le<std::uint32_t>(is, "version");
    if (version != parameter_format_version) {
        throw FormatError("unsupported parameter file version " + std::to_string(version));
    }
    const auto count = io::read_le<std::uint32_t>(is, "parameter count");
    NamedTensors out;
    for (std::uint32_t p = 0; p < count; ++p) {
        const auto len = io::read_le<std::uint16_t>(is, "name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw FormatError("unexpected end of file reading parameter name");
        const auto rank = io::read_le<std::uint8_t>(is, "rank");
        Shape shape(rank);
        for (auto& e : shape) {
            e = io::read_le<std::uint32_t>(is, "extent");
            if (e == 0) throw FormatError("zero extent in parameter " + name);
        }
        Tensor<float> t(shape);
        for (Index i = 0; i < t.size(); ++i) t[i] = io::read_le<float>(is, "tensor data");
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

void write_parameter_file(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    write_parameter_file(os, tensors);
}

NamedTensors read_parameter_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return read_parameter_file(is);
}

} // namespace vnsc
