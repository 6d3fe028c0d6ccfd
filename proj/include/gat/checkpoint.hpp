#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gat/model.hpp"
#include "gat/scenes.hpp"

namespace gat {

// CRC-64/XZ (reflected ECMA-182 polynomial)
inline std::uint64_t crc64(const unsigned char* data, std::size_t len) {
    static const std::array<std::uint64_t, 256> table = [] {
        std::array<std::uint64_t, 256> t{};
        for (std::uint64_t i = 0; i < 256; ++i) {
            std::uint64_t c = i;
            for (int k = 0; k < 8; ++k)
                c = c & 1 ? 0xC96C5795D7870F42ULL ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint64_t crc = ~0ULL;
    for (std::size_t i = 0; i < len; ++i)
        crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
    return ~crc;
}

inline std::uint64_t crc64(const std::string& s) {
    return crc64(reinterpret_cast<const unsigned char*>(s.data()), s.size());
}

namespace detail {

inline void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& buf, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(buf, bits);
}

struct Cursor {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size())
            throw CheckpointError(CheckpointError::Kind::truncated,
                                  "checkpoint truncated at byte " + std::to_string(pos));
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }

    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "GATCKPT1";

// Layout: magic, length-prefixed key=value config record (which carries the
// vocabulary), then each parameter in lexicographic name order as
// length-prefixed name, rank, dims, raw 64-bit little-endian data; finally
// a 64-bit CRC of everything before it.
inline std::string checkpoint_bytes(const ModelParams& params, const ModelConfig& cfg,
                                    const Vocabulary& vocab) {
    std::string buf(kCheckpointMagic, 8);
    std::map<std::string, std::string> record = cfg.to_map();
    record["vocab_tokens"] = vocab.joined();
    std::string cfg_text;
    for (const auto& [k, v] : record) cfg_text += k + "=" + v + "\n";
    detail::put_u64(buf, cfg_text.size());
    buf += cfg_text;
    for (const auto& [name, t] : params.map()) {
        detail::put_u64(buf, name.size());
        buf += name;
        detail::put_u64(buf, t.rank());
        for (const std::size_t dim : t.shape()) detail::put_u64(buf, dim);
        for (const double v : t.data()) detail::put_f64(buf, v);
    }
    detail::put_u64(buf, crc64(buf));
    return buf;
}

inline void save_checkpoint(const ModelParams& params, const ModelConfig& cfg,
                            const Vocabulary& vocab, const std::string& path) {
    for (const auto& [name, t] : params.map())
        if (!all_finite(t)) throw NumericError("checkpoint: non-finite parameter " + name);
    const std::string buf = checkpoint_bytes(params, cfg, vocab);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed for " + path);
}

struct Checkpoint {
    ModelParams params;
    ModelConfig cfg;
    Vocabulary vocab;
};

inline Checkpoint parse_checkpoint(const std::string& buf) {
    if (buf.size() < 8 || buf.compare(0, 8, kCheckpointMagic, 8) != 0)
        throw CheckpointError(CheckpointError::Kind::bad_magic,
                              "not a checkpoint file (bad magic)");
    if (buf.size() < 16)
        throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint too short");
    const std::uint64_t stored_crc = [&] {
        detail::Cursor tail{buf, buf.size() - 8};
        return tail.u64();
    }();
    const std::uint64_t actual_crc =
        crc64(reinterpret_cast<const unsigned char*>(buf.data()), buf.size() - 8);
    if (stored_crc != actual_crc)
        throw CheckpointError(CheckpointError::Kind::bad_crc,
                              "checkpoint CRC mismatch (corrupt or truncated file)");

    detail::Cursor cur{buf, 8};
    const std::uint64_t cfg_len = cur.u64();
    cur.need(cfg_len);
    const std::string cfg_text = cur.bytes(cfg_len);
    std::map<std::string, std::string> record;
    std::istringstream is(cfg_text);
    std::string line;
    while (std::getline(is, line)) {
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw CheckpointError(CheckpointError::Kind::bad_config,
                                  "malformed config line: " + line);
        record[line.substr(0, eq)] = line.substr(eq + 1);
    }
    Checkpoint ck;
    try {
        ck.cfg = ModelConfig::from_map(record);
        ck.cfg.validate();
        const auto vt = record.find("vocab_tokens");
        if (vt == record.end())
            throw ValidationError("config record lacks vocab_tokens");
        ck.vocab = Vocabulary::from_joined(vt->second);
    } catch (const Error& e) {
        throw CheckpointError(CheckpointError::Kind::bad_config, e.what());
    }
    if (ck.vocab.size() != ck.cfg.vocab)
        throw CheckpointError(CheckpointError::Kind::bad_config,
                              "vocabulary size disagrees with config");

    // expected names and shapes follow from the config
    const ModelParams expected = ModelParams::init(ck.cfg);
    auto want = expected.map().begin();
    const std::size_t end = buf.size() - 8;
    while (cur.pos < end) {
        const std::uint64_t name_len = cur.u64();
        const std::string name = cur.bytes(name_len);
        const std::uint64_t rank = cur.u64();
        if (rank < 1 || rank > 3)
            throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                                  "parameter " + name + " has rank " + std::to_string(rank));
        Shape shape(rank);
        std::size_t count = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            shape[i] = cur.u64();
            count *= shape[i];
        }
        std::vector<double> data(count);
        for (std::size_t i = 0; i < count; ++i) data[i] = cur.f64();
        if (want == expected.map().end())
            throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                                  "unexpected extra parameter " + name);
        if (want->first != name)
            throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                                  "expected parameter " + want->first + ", found " + name);
        if (want->second.shape() != shape)
            throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                                  "parameter " + name + " has shape " + shape_str(shape) +
                                      ", config requires " + shape_str(want->second.shape()));
        ck.params.insert_raw(name, Tensor::of(std::move(shape), std::move(data)));
        ++want;
    }
    if (want != expected.map().end())
        throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                              "missing parameter " + want->first);
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse_checkpoint(os.str());
}

}  // namespace gat
