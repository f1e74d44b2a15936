#include "vnsc/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

namespace vnsc {

void TrainConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("lr_decay must be in (0, 1]");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must be in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (crop_frames < 1) throw ConfigError("crop_frames must be >= 1");
    if (toy_utterances < 1) throw ConfigError("toy_utterances must be >= 1");
    if (!(toy_duration > 0)) throw ConfigError("toy_duration must be positive");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError("invalid value for " + key + ": '" + value + "'");
    return out;
}

std::vector<Index> parse_list(const std::string& key, const std::string& value) {
    std::vector<Index> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<Index>(key, trim(item)));
    if (out.empty()) throw ConfigError("empty list for " + key);
    return out;
}

std::string join(const std::vector<Index>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

struct Field {
    std::function<void(Config&, const std::string&, const std::string&)> set;
    std::function<std::string(const Config&)> get;
};

#define VNSC_INDEX_FIELD(expr)                                                                                  \
    Field {                                                                                                     \
        [](Config& c, const std::string& k, const std::string& v) { c.expr = parse_number<Index>(k, v); },     \
            [](const Config& c) { return std::to_string(c.expr); }                                              \
    }
#define VNSC_DOUBLE_FIELD(expr)                                                                                 \
    Field {                                                                                                     \
        [](Config& c, const std::string& k, const std::string& v) { c.expr = parse_number<double>(k, v); },    \
            [](const Config& c) { return fmt(c.expr); }                                                         \
    }

const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> table = {
        {"scenario", Field{[](Config&, const std::string&, const std::string&) {},
                           [](const Config& c) { return to_string(c.model.scenario); }}},
        {"seed", Field{[](Config& c, const std::string& k, const std::string& v) {
                           c.model.seed = parse_number<std::uint64_t>(k, v);
                       },
                       [](const Config& c) { return std::to_string(c.model.seed); }}},
        {"sample_rate", Field{[](Config& c, const std::string& k, const std::string& v) {
                                  c.model.sample_rate = parse_number<int>(k, v);
                                  c.model.mel.sample_rate = c.model.sample_rate;
                              },
                              [](const Config& c) { return std::to_string(c.model.sample_rate); }}},
        {"frame_shift", VNSC_INDEX_FIELD(model.codec.frame_shift)},
        {"n_blocks", VNSC_INDEX_FIELD(model.codec.n_blocks)},
        {"speech_dim", VNSC_INDEX_FIELD(model.codec.speech_dim)},
        {"code_dim", Field{[](Config& c, const std::string& k, const std::string& v) {
                               c.model.codec.code_dim = parse_number<Index>(k, v);
                               c.model.rvq.dim = c.model.codec.code_dim;
                           },
                           [](const Config& c) { return std::to_string(c.model.codec.code_dim); }}},
        {"fusion_index", VNSC_INDEX_FIELD(model.codec.fusion_index)},
        {"downsample_factor", VNSC_INDEX_FIELD(model.codec.downsample)},
        {"dw_kernel", VNSC_INDEX_FIELD(model.codec.dw_kernel)},
        {"io_kernel", VNSC_INDEX_FIELD(model.codec.io_kernel)},
        {"expansion", VNSC_INDEX_FIELD(model.codec.expansion)},
        {"rvq_q", VNSC_INDEX_FIELD(model.rvq.stages)},
        {"rvq_k", VNSC_INDEX_FIELD(model.rvq.entries)},
        {"rvq_decay", VNSC_DOUBLE_FIELD(model.rvq.decay)},
        {"image_size", VNSC_INDEX_FIELD(model.vision.image_size)},
        {"vision_channels", Field{[](Config& c, const std::string& k, const std::string& v) {
                                      c.model.vision.channels = parse_list(k, v);
                                  },
                                  [](const Config& c) { return join(c.model.vision.channels); }}},
        {"vision_post_channels", Field{[](Config& c, const std::string& k, const std::string& v) {
                                           c.model.vision.post_channels = parse_list(k, v);
                                       },
                                       [](const Config& c) { return join(c.model.vision.post_channels); }}},
        {"lambda_i", VNSC_DOUBLE_FIELD(model.lambda_image)},
        {"lambda_d", VNSC_DOUBLE_FIELD(model.lambda_distill)},
        {"w_mdct", VNSC_DOUBLE_FIELD(model.w_mdct)},
        {"w_mel", VNSC_DOUBLE_FIELD(model.w_mel)},
        {"w_quant", VNSC_DOUBLE_FIELD(model.w_quant)},
        {"mel_n_fft", VNSC_INDEX_FIELD(model.mel.n_fft)},
        {"mel_hop", VNSC_INDEX_FIELD(model.mel.hop)},
        {"mel_n_mels", VNSC_INDEX_FIELD(model.mel.n_mels)},
        {"mel_floor", VNSC_DOUBLE_FIELD(model.mel.floor)},
        {"lr", VNSC_DOUBLE_FIELD(train.lr)},
        {"lr_decay", VNSC_DOUBLE_FIELD(train.lr_decay)},
        {"beta1", VNSC_DOUBLE_FIELD(train.beta1)},
        {"beta2", VNSC_DOUBLE_FIELD(train.beta2)},
        {"adam_eps", VNSC_DOUBLE_FIELD(train.adam_eps)},
        {"weight_decay", VNSC_DOUBLE_FIELD(train.weight_decay)},
        {"epochs", VNSC_INDEX_FIELD(train.epochs)},
        {"max_steps", VNSC_INDEX_FIELD(train.max_steps)},
        {"batch_size", VNSC_INDEX_FIELD(train.batch_size)},
        {"crop_frames", VNSC_INDEX_FIELD(train.crop_frames)},
        {"toy_utterances", VNSC_INDEX_FIELD(train.toy_utterances)},
        {"toy_duration", VNSC_DOUBLE_FIELD(train.toy_duration)},
    };
    return table;
}

} // namespace

Config parse_config(const std::string& text, std::optional<Scenario> scenario_override) {
    std::map<std::string, std::pair<std::string, int>> entries;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (!entries.emplace(key, std::make_pair(value, lineno)).second) {
            throw ConfigError("line " + std::to_string(lineno) + ": duplicate key " + key);
        }
    }
    Scenario scenario = Scenario::audio_only;
    if (auto it = entries.find("scenario"); it != entries.end()) scenario = parse_scenario(it->second.first);
    if (scenario_override) scenario = *scenario_override;

    Config cfg;
    cfg.model = ModelConfig::defaults(scenario);
    for (const auto& [key, entry] : entries) {
        auto it = std::find_if(fields().begin(), fields().end(), [&](const auto& f) { return f.first == key; });
        if (it == fields().end()) {
            throw ConfigError("line " + std::to_string(entry.second) + ": unknown key '" + key + "'");
        }
        it->second.set(cfg, key, entry.first);
    }
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

Config load_config(const std::filesystem::path& path, std::optional<Scenario> scenario_override) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), scenario_override);
}

std::string echo_config(const Config& cfg) {
    std::string out;
    for (const auto& [key, field] : fields()) out += key + "=" + field.get(cfg) + "\n";
    return out;
}

} // namespace vnsc
