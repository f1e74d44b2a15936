#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vnsc/bitstream.hpp"
#include "vnsc/cli.hpp"
#include "vnsc/training.hpp"
#include "vnsc/wav.hpp"

using namespace vnsc;
namespace fs = std::filesystem;

namespace {

const fs::path fixtures = VNSC_FIXTURE_DIR;

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("vnsc_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

double field(const std::string& line, const std::string& key) {
    const auto at = line.find(key + "=");
    REQUIRE(at != std::string::npos);
    return std::stod(line.substr(at + key.size() + 1));
}

} // namespace

TEST_CASE("bit packing is MSB first") {
    BitWriter w;
    w.put(0b101, 3);
    w.put(0b1, 1);
    w.put(0x3FF, 10);
    CHECK(w.bits_written() == 14);
    const auto b = w.finish();
    REQUIRE(b.size() == 2);
    CHECK(b[0] == 0b10111111);
    CHECK(b[1] == 0b11111100);
    BitReader r(b.data(), b.size());
    CHECK(r.get(3) == 0b101);
    CHECK(r.get(1) == 1);
    CHECK(r.get(10) == 0x3FF);
    CHECK(r.bits_available() == 2);
    CHECK_THROWS_AS(r.get(3), FormatError);
    BitWriter bad;
    CHECK_THROWS_AS(bad.put(8, 3), ConfigError);
}

TEST_CASE("index payload round trip and accounting") {
    Rng rng(4);
    for (Index k : {2, 3, 16, 1000, 1024, 4096}) {
        CodeIndices idx(4, 37);
        for (auto& v : idx.values) v = static_cast<std::uint32_t>(rng.below(k));
        const auto payload = pack_indices(idx, k);
        const Index bits = 4 * 37 * bits_per_index(k);
        CHECK(static_cast<Index>(payload.size()) == (bits + 7) / 8);
        CHECK(unpack_indices(payload, 4, 37, k) == idx);
    }
    // defaults: 10 s at 150 latent frames/s
    BitstreamHeader h;
    h.latent_frames = 1500;
    CHECK(h.payload_bits() == 60000);
}

TEST_CASE("truncated and malformed payloads are rejected") {
    CodeIndices idx(2, 5);
    for (std::size_t i = 0; i < idx.values.size(); ++i) idx.values[i] = static_cast<std::uint32_t>(i);
    auto payload = pack_indices(idx, 16); // 40 bits
    REQUIRE(payload.size() == 5);
    auto cut = payload;
    cut.pop_back();
    try {
        unpack_indices(cut, 2, 5, 16);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()) == "truncated payload: expected 40 bits, found 32");
    }
    auto longer = payload;
    longer.push_back(0);
    CHECK_THROWS_AS(unpack_indices(longer, 2, 5, 16), FormatError);
    // index 12 >= K = 10 with 4-bit fields
    CodeIndices big(1, 1);
    big.values[0] = 12;
    CHECK_THROWS_AS(unpack_indices(pack_indices(big, 16), 1, 1, 10), FormatError);
    // nonzero padding
    CodeIndices one(1, 1);
    auto padded = pack_indices(one, 16);
    padded[0] |= 0x01;
    CHECK_THROWS_AS(unpack_indices(padded, 1, 1, 16), FormatError);
}

TEST_CASE("bitstream file layout") {
    ModelConfig cfg = ModelConfig::defaults(Scenario::vua);
    Bitstream b;
    b.header = make_header(cfg, Scenario::vua, 3);
    b.indices = CodeIndices(4, 3);
    b.indices.at(0, 0) = 1023;
    b.indices.at(3, 2) = 5;
    std::ostringstream os;
    write_bitstream(os, b);
    const std::string s = os.str();
    REQUIRE(s.size() == bitstream_header_bytes + 15); // 120 bits
    CHECK(s.substr(0, 8) == "VNSCBITS");
    const auto u8 = [&](std::size_t i) { return static_cast<unsigned>(static_cast<unsigned char>(s[i])); };
    CHECK(u8(8) == 1);   // version
    CHECK(u8(12) == 2);  // mode
    CHECK(u8(13) + (u8(14) << 8) + (u8(15) << 16) == 48000u);
    CHECK(u8(17) == 40);  // frame shift
    CHECK(u8(19) == 8);   // downsample
    CHECK(u8(21) == 4);   // Q
    CHECK(u8(22) + (u8(23) << 8) == 1024u);
    CHECK(u8(26) == 3);   // latent frames
    CHECK(u8(30) == 0xFF); // 1023 in 10 bits: 11111111 11...
    CHECK((u8(31) >> 6) == 3u);
    std::istringstream is(s);
    const Bitstream back = read_bitstream(is);
    CHECK(back.header == b.header);
    CHECK(back.indices == b.indices);

    std::string corrupt = s;
    corrupt[12] = 7;
    std::istringstream bad_mode(corrupt);
    CHECK_THROWS_AS(read_bitstream(bad_mode), FormatError);
    std::istringstream short_header(s.substr(0, 20));
    CHECK_THROWS_AS(read_bitstream(short_header), FormatError);
    std::istringstream not_bits("RIFF....");
    CHECK_THROWS_AS(read_bitstream(not_bits), FormatError);
}

TEST_CASE("header and checkpoint must agree") {
    const ModelConfig va = ModelConfig::defaults(Scenario::va);
    const ModelConfig vua = ModelConfig::defaults(Scenario::vua);
    const ModelConfig ao = ModelConfig::defaults(Scenario::audio_only);
    CHECK_NOTHROW(check_compatible(make_header(va, Scenario::va, 1), va));
    CHECK_NOTHROW(check_compatible(make_header(vua, Scenario::vua, 1), vua));
    CHECK_NOTHROW(check_compatible(make_header(ao, Scenario::audio_only, 1), vua));
    CHECK_NOTHROW(check_compatible(make_header(ao, Scenario::audio_only, 1), ao));
    CHECK_THROWS_AS(check_compatible(make_header(va, Scenario::va, 1), vua), FormatError);
    CHECK_THROWS_AS(check_compatible(make_header(vua, Scenario::vua, 1), ao), FormatError);
    CHECK_THROWS_AS(check_compatible(make_header(ao, Scenario::audio_only, 1), va), FormatError);
    ModelConfig other = va;
    other.rvq.entries = 512;
    try {
        check_compatible(make_header(va, Scenario::va, 1), other);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("rvq_k is 1024 in the stream but 512") != std::string::npos);
    }
    other = va;
    other.codec.downsample = 4;
    CHECK_THROWS_AS(check_compatible(make_header(va, Scenario::va, 1), other), FormatError);
}

TEST_CASE("golden fixtures decode and encode byte-exactly") {
    const auto tmp = scratch("golden");
    const std::string model = (fixtures / "model").string();
    auto r = cli({"encode", "--in", (fixtures / "clip.wav").string(), "--lips", (fixtures / "clip.lips").string(),
                  "--model", model, "--out", (tmp / "clip.vnscbits").string()});
    REQUIRE(r.code == 0);
    CHECK(bytes(tmp / "clip.vnscbits") == bytes(fixtures / "clip.vnscbits"));
    r = cli({"decode", "--in", (fixtures / "clip.vnscbits").string(), "--model", model, "--out",
             (tmp / "clip.wav").string()});
    REQUIRE(r.code == 0);
    CHECK(bytes(tmp / "clip.wav") == bytes(fixtures / "clip_decoded.wav"));

    // checkpoint files survive a load/save cycle unchanged
    Checkpoint ck = load_checkpoint(fixtures / "model");
    AdamW<float> opt(ck.model->parameters(), 0.8, 0.99, 1e-8, 0.01);
    opt.import_state(ck.optimizer);
    save_checkpoint(tmp / "again", ck.config, *ck.model, &opt);
    for (const char* f : {"model.vnscparm", "optim.vnscparm", "config.txt"})
        CHECK(bytes(tmp / "again" / f) == bytes(fixtures / "model" / f));
    fs::remove_all(tmp);
}

TEST_CASE("encode, decode and eval through the command line") {
    const auto tmp = scratch("roundtrip");
    const std::string d = tmp.string();
    std::ofstream(tmp / "cfg") << bytes(fixtures / "mini.cfg") << "max_steps=3\n";

    // VUA and audio-only models from the same seed
    auto r = cli({"train", "--config", d + "/cfg", "--scenario", "vua", "--out", d + "/vua"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("epoch=1 step=2") != std::string::npos);
    CHECK(r.out.find("epoch=2 step=3") != std::string::npos);
    CHECK(field(r.out, "l_distill") > 0.0);

    const std::string wav = (fixtures / "clip.wav").string(), lips = (fixtures / "clip.lips").string();
    r = cli({"encode", "--in", wav, "--model", d + "/vua", "--out", d + "/a.bits"});
    REQUIRE(r.code == 0);
    CHECK(field(r.out, "payload_bits") == 38 * 2 * 4);
    r = cli({"encode", "--in", wav, "--model", d + "/vua", "--mode", "audio-only", "--out", d + "/b.bits"});
    REQUIRE(r.code == 0);
    // identical except the mode byte
    std::string a = bytes(tmp / "a.bits"), b = bytes(tmp / "b.bits");
    REQUIRE(a.size() == b.size());
    CHECK(a[12] == 2);
    CHECK(b[12] == 0);
    a[12] = b[12] = 0;
    CHECK(a == b);

    // VUA never takes lips at inference
    r = cli({"encode", "--in", wav, "--lips", lips, "--model", d + "/vua", "--out", d + "/c.bits"});
    CHECK(r.code == exit_usage);

    for (const char* name : {"x.wav", "y.wav"}) {
        r = cli({"decode", "--in", d + "/a.bits", "--model", d + "/vua", "--out", d + "/" + name});
        REQUIRE(r.code == 0);
    }
    CHECK(bytes(tmp / "x.wav") == bytes(tmp / "y.wav"));
    CHECK(read_wav(tmp / "x.wav").size() == 38 * 320);

    // truncated payload
    std::ofstream(tmp / "cut.bits", std::ios::binary) << bytes(tmp / "a.bits").substr(0, 60);
    r = cli({"decode", "--in", d + "/cut.bits", "--model", d + "/vua", "--out", d + "/z.wav"});
    CHECK(r.code == exit_format);
    CHECK(r.err.find("expected 304 bits, found 240") != std::string::npos);

    // stream/model mismatch: VA checkpoint cannot decode a VUA stream
    r = cli({"decode", "--in", d + "/a.bits", "--model", (fixtures / "model").string(), "--out", d + "/z.wav"});
    CHECK(r.code == exit_format);

    // eval: identical, constructed 0 dB, and the noisy round trip
    r = cli({"eval", "--ref", wav, "--deg", wav});
    REQUIRE(r.code == 0);
    CHECK(field(r.out, "ssnr_db") == 35.0);
    CHECK(field(r.out, "mse") == 0.0);
    Waveform ref, deg;
    ref.samples = Vector<float>::Constant(3200, 0.25f);
    deg.samples = Vector<float>::Zero(3200); // error equals the signal: 0 dB
    write_wav(tmp / "ref.wav", ref);
    write_wav(tmp / "deg.wav", deg);
    r = cli({"eval", "--ref", d + "/ref.wav", "--deg", d + "/deg.wav"});
    REQUIRE(r.code == 0);
    CHECK(std::abs(field(r.out, "ssnr_db")) < 1e-9);
    r = cli({"eval", "--ref", wav, "--model", d + "/vua", "--noise-snr", "40", "--seed", "3"});
    REQUIRE(r.code == 0);
    CHECK(field(r.out, "input_snr_db") == doctest::Approx(40.0).epsilon(1e-6));
    const double s1 = field(r.out, "ssnr_db");
    r = cli({"eval", "--ref", wav, "--model", d + "/vua", "--noise-snr", "40", "--seed", "3"});
    CHECK(field(r.out, "ssnr_db") == s1);
    r = cli({"eval", "--ref", wav, "--deg", wav, "--noise-snr", "40"});
    CHECK(r.code == exit_usage);
    fs::remove_all(tmp);
}

TEST_CASE("train resumes to the same checkpoint") {
    const auto tmp = scratch("resume");
    const std::string d = tmp.string();
    std::string text = bytes(fixtures / "mini.cfg");
    text.replace(text.find("epochs=5"), 8, "epochs=2");
    std::ofstream(tmp / "two") << text;
    text.replace(text.find("epochs=2"), 8, "epochs=4");
    std::ofstream(tmp / "four") << text;

    REQUIRE(cli({"train", "--config", d + "/four", "--out", d + "/straight"}).code == 0);
    REQUIRE(cli({"train", "--config", d + "/two", "--out", d + "/split"}).code == 0);
    // bump the epoch budget in the saved config, then resume
    std::string saved = bytes(tmp / "split" / "config.txt");
    saved.replace(saved.find("epochs=2"), 8, "epochs=4");
    std::ofstream(tmp / "split" / "config.txt") << saved;
    const auto r = cli({"train", "--resume", "--out", d + "/split"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("epoch=3 step=6") != std::string::npos);
    for (const char* f : {"model.vnscparm", "optim.vnscparm", "config.txt"})
        CHECK(bytes(tmp / "split" / f) == bytes(tmp / "straight" / f));
    fs::remove_all(tmp);
}

TEST_CASE("exit codes") {
    CHECK(cli({}).code == exit_usage);
    CHECK(cli({"--help"}).code == exit_ok);
    CHECK(cli({"compress"}).code == exit_usage);
    CHECK(cli({"encode", "--in", "x.wav"}).code == exit_usage);
    CHECK(cli({"train", "--scenario", "audiovisual", "--out", "/tmp/vnsc_never"}).code == exit_usage);
    CHECK(cli({"decode", "--in", "/nonexistent.bits", "--model", (fixtures / "model").string(), "--out", "/tmp/x.wav"})
              .code == exit_format);
    const auto tmp = scratch("codes");
    std::ofstream(tmp / "bad.wav") << "RIFF0000WAVEjunk";
    const auto r = cli({"encode", "--in", (tmp / "bad.wav").string(), "--model", (fixtures / "model").string(),
                        "--lips", (fixtures / "clip.lips").string(), "--out", (tmp / "o").string()});
    CHECK(r.code == exit_format);
    Waveform w;
    w.sample_rate = 16000;
    w.samples = Vector<float>::Zero(160);
    write_wav(tmp / "16k.wav", w);
    CHECK(cli({"eval", "--ref", (tmp / "16k.wav").string(), "--deg", (tmp / "16k.wav").string()}).code == exit_format);
    // VA model without lips
    CHECK(cli({"encode", "--in", (fixtures / "clip.wav").string(), "--model", (fixtures / "model").string(), "--out",
               (tmp / "o").string()})
              .code == exit_usage);
    fs::remove_all(tmp);
}
