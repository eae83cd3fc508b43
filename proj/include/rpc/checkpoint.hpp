#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rpc/dataset_io.hpp"
#include "rpc/error.hpp"
#include "rpc/tensor.hpp"

// Checkpoint layout: a text manifest followed by one binary block.
//
//   RPCCKPT1
//   meta <key> <value>                  (any number, value runs to end of line)
//   tensor <name> <rows> <cols> <offset>
//   end
//   <raw little-endian float64 data; offsets are relative to the byte after "end\n">

namespace rpc {

inline constexpr std::string_view kCheckpointMagic = "RPCCKPT1";

struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::map<std::string, std::string> meta;

    const Tensor& tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) {
                return t;
            }
        }
        throw ParseError("checkpoint has no tensor named '" + name + "'");
    }

    const std::string& meta_value(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) {
            throw ParseError("checkpoint has no metadata key '" + key + "'");
        }
        return it->second;
    }
};

namespace ckpt_detail {
inline std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        std::uint64_t r = 0;
        for (int i = 0; i < 8; ++i) {
            r = (r << 8) | ((v >> (8 * i)) & 0xff);
        }
        return r;
    }
}
}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
    std::string head;
    head += kCheckpointMagic;
    head += '\n';
    for (const auto& [k, v] : c.meta) {
        if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw ContractError("checkpoint metadata '" + k + "' contains a separator");
        }
        head += "meta " + k + " " + v + "\n";
    }
    std::size_t offset = 0;
    for (const auto& [name, t] : c.tensors) {
        head += "tensor " + name + " " + std::to_string(t.rows()) + " " + std::to_string(t.cols()) + " " +
                std::to_string(offset) + "\n";
        offset += t.size() * sizeof(double);
    }
    head += "end\n";
    std::string out = head;
    out.reserve(head.size() + offset);
    for (const auto& [name, t] : c.tensors) {
        for (double v : t.data()) {
            const std::uint64_t bits = ckpt_detail::to_le(std::bit_cast<std::uint64_t>(v));
            char b[8];
            std::memcpy(b, &bits, 8);
            out.append(b, 8);
        }
    }
    return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source = "checkpoint") {
    io_detail::LineReader r(bytes, source);
    std::string_view line;
    if (!r.next(line) || line != kCheckpointMagic) {
        r.fail("bad checkpoint magic");
    }
    struct Entry {
        std::string name;
        std::size_t rows, cols, offset;
    };
    std::vector<Entry> entries;
    Checkpoint c;
    std::size_t consumed = line.size() + 1;
    bool ended = false;
    while (r.next(line)) {
        consumed += line.size() + 1;
        if (line == "end") {
            ended = true;
            break;
        }
        if (line.starts_with("meta ")) {
            auto rest = line.substr(5);
            const auto sp = rest.find(' ');
            if (sp == std::string_view::npos) {
                r.fail("malformed meta line");
            }
            c.meta[std::string(rest.substr(0, sp))] = std::string(rest.substr(sp + 1));
        } else if (line.starts_with("tensor ")) {
            std::istringstream ss{std::string(line.substr(7))};
            Entry e;
            if (!(ss >> e.name >> e.rows >> e.cols >> e.offset)) {
                r.fail("malformed tensor line");
            }
            entries.push_back(std::move(e));
        } else {
            r.fail("unexpected manifest line '" + std::string(line) + "'");
        }
    }
    if (!ended) {
        r.fail_eof("manifest not terminated by 'end'");
    }
    const std::string_view data = bytes.substr(consumed);
    for (const auto& e : entries) {
        const std::size_t n = e.rows * e.cols;
        if (e.offset + n * 8 > data.size()) {
            throw ParseError(source + ": tensor '" + e.name + "' runs past end of file (byte offset " +
                             std::to_string(consumed + e.offset) + ")");
        }
        Tensor t(e.rows, e.cols);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, data.data() + e.offset + 8 * i, 8);
            t[i] = std::bit_cast<double>(ckpt_detail::to_le(bits));
        }
        c.tensors.emplace_back(e.name, std::move(t));
    }
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    io_detail::write_file(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint(io_detail::read_file(path), path.string());
}

}  // namespace rpc
