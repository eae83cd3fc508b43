#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "rpc/error.hpp"
#include "rpc/synthdata.hpp"

// Dataset file layout:
//
//   magic=RPCGCD1
//   dim=<d>
//   num_classes=<K>
//   num_known=<C_L>
//   labeled=<n_l>
//   unlabeled=<n_u>
//   seed=<u64>
//   <blank line>
//   L,<class>,v0,...,v{d-1}      labeled rows
//   U,-1,v0,...,v{d-1}           unlabeled rows
//
// Hidden labels for the unlabeled rows go to "<path>.truth":
//
//   magic=RPCGCD1-TRUTH
//   num_classes=<K>
//   num_known=<C_L>
//   count=<n_u>
//   <blank line>
//   one class id per line
//
// Floats are written in shortest round-trip form, so save/load is bit-exact.

namespace rpc {

inline constexpr std::string_view kDatasetMagic = "RPCGCD1";
inline constexpr std::string_view kTruthMagic = "RPCGCD1-TRUTH";

namespace io_detail {

inline void append_double(std::string& out, double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, res.ptr);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string() + " for reading");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

/// Line cursor that tracks line number and byte offset for error messages.
class LineReader {
  public:
    LineReader(std::string_view text, std::string source) : text_(text), source_(std::move(source)) {}

    bool next(std::string_view& line) {
        if (pos_ >= text_.size()) {
            return false;
        }
        line_start_ = pos_;
        ++line_no_;
        const auto nl = text_.find('\n', pos_);
        const auto end = nl == std::string_view::npos ? text_.size() : nl;
        line = text_.substr(pos_, end - pos_);
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        pos_ = nl == std::string_view::npos ? text_.size() : nl + 1;
        return true;
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError(source_ + ": line " + std::to_string(line_no_) + " (byte offset " +
                         std::to_string(line_start_) + "): " + what);
    }

    [[noreturn]] void fail_eof(const std::string& what) const {
        throw ParseError(source_ + ": unexpected end of file at byte offset " +
                         std::to_string(text_.size()) + ": " + what);
    }

  private:
    std::string_view text_;
    std::string source_;
    std::size_t pos_ = 0;
    std::size_t line_start_ = 0;
    std::size_t line_no_ = 0;
};

inline std::map<std::string, std::string, std::less<>> read_header(LineReader& r) {
    std::map<std::string, std::string, std::less<>> kv;
    std::string_view line;
    while (true) {
        if (!r.next(line)) {
            r.fail_eof("header not terminated by a blank line");
        }
        if (line.empty()) {
            return kv;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            r.fail("malformed header line '" + std::string(line) + "'");
        }
        kv.emplace(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
    }
}

template <class T>
T parse_number(std::string_view s, const LineReader& r, const std::string& what) {
    T v{};
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        r.fail("invalid " + what + " '" + std::string(s) + "'");
    }
    return v;
}

template <class T>
T header_value(const std::map<std::string, std::string, std::less<>>& kv, std::string_view key,
               const LineReader& r) {
    auto it = kv.find(key);
    if (it == kv.end()) {
        r.fail("header is missing key '" + std::string(key) + "'");
    }
    return parse_number<T>(it->second, r, std::string(key));
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto c = line.find(',', start);
        if (c == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, c - start));
        start = c + 1;
    }
}

}  // namespace io_detail

inline std::filesystem::path truth_path(const std::filesystem::path& dataset) {
    return std::filesystem::path(dataset.string() + ".truth");
}

inline std::string serialize_dataset(const GcdSplit& s) {
    std::string out;
    out += "magic=";
    out += kDatasetMagic;
    out += "\ndim=" + std::to_string(s.dim());
    out += "\nnum_classes=" + std::to_string(s.num_classes);
    out += "\nnum_known=" + std::to_string(s.num_known);
    out += "\nlabeled=" + std::to_string(s.labeled.rows());
    out += "\nunlabeled=" + std::to_string(s.unlabeled.rows());
    out += "\nseed=" + std::to_string(s.seed);
    out += "\n\n";
    auto rows = [&out](const Tensor& x, std::size_t r, char tag, int cls) {
        out += tag;
        out += ',';
        out += std::to_string(cls);
        for (double v : x.row_span(r)) {
            out += ',';
            io_detail::append_double(out, v);
        }
        out += '\n';
    };
    for (std::size_t i = 0; i < s.labeled.rows(); ++i) {
        rows(s.labeled, i, 'L', s.labels[i]);
    }
    for (std::size_t i = 0; i < s.unlabeled.rows(); ++i) {
        rows(s.unlabeled, i, 'U', -1);
    }
    return out;
}

inline GcdSplit parse_dataset(std::string_view text, const std::string& source = "dataset") {
    using namespace io_detail;
    LineReader r(text, source);
    std::string_view first;
    if (!r.next(first)) {
        r.fail_eof("empty file");
    }
    if (first != "magic=" + std::string(kDatasetMagic)) {
        r.fail("bad magic line '" + std::string(first) + "', expected magic=" + std::string(kDatasetMagic));
    }
    const auto kv = read_header(r);
    const auto dim = header_value<std::size_t>(kv, "dim", r);
    const auto n_l = header_value<std::size_t>(kv, "labeled", r);
    const auto n_u = header_value<std::size_t>(kv, "unlabeled", r);

    GcdSplit s;
    s.num_classes = header_value<int>(kv, "num_classes", r);
    s.num_known = header_value<int>(kv, "num_known", r);
    s.seed = header_value<std::uint64_t>(kv, "seed", r);
    s.labeled = Tensor(n_l, dim);
    s.unlabeled = Tensor(n_u, dim);
    s.labels.reserve(n_l);

    std::size_t got_l = 0, got_u = 0;
    std::string_view line;
    while (r.next(line)) {
        if (line.empty()) {
            continue;
        }
        const auto cells = split_commas(line);
        if (cells.size() != dim + 2) {
            r.fail("expected " + std::to_string(dim + 2) + " columns, found " + std::to_string(cells.size()));
        }
        const int cls = parse_number<int>(cells[1], r, "class id");
        Tensor* dst = nullptr;
        std::size_t row = 0;
        if (cells[0] == "L") {
            if (got_l >= n_l) {
                r.fail("more labeled rows than declared");
            }
            if (cls < 0 || cls >= s.num_known) {
                r.fail("labeled class id " + std::to_string(cls) + " outside known classes");
            }
            s.labels.push_back(cls);
            dst = &s.labeled;
            row = got_l++;
        } else if (cells[0] == "U") {
            if (got_u >= n_u) {
                r.fail("more unlabeled rows than declared");
            }
            if (cls != -1) {
                r.fail("unlabeled row must carry class -1");
            }
            dst = &s.unlabeled;
            row = got_u++;
        } else {
            r.fail("unknown split tag '" + std::string(cells[0]) + "'");
        }
        for (std::size_t p = 0; p < dim; ++p) {
            (*dst)(row, p) = parse_number<double>(cells[p + 2], r, "value");
        }
    }
    if (got_l != n_l || got_u != n_u) {
        r.fail_eof("truncated: declared " + std::to_string(n_l) + "+" + std::to_string(n_u) +
                   " rows, found " + std::to_string(got_l) + "+" + std::to_string(got_u));
    }
    return s;
}

inline std::string serialize_truth(const EvalHandle& h) {
    std::string out;
    out += "magic=";
    out += kTruthMagic;
    out += "\nnum_classes=" + std::to_string(h.num_classes());
    out += "\nnum_known=" + std::to_string(h.num_known());
    out += "\ncount=" + std::to_string(h.truth().size());
    out += "\n\n";
    for (int c : h.truth()) {
        out += std::to_string(c);
        out += '\n';
    }
    return out;
}

inline EvalHandle parse_truth(std::string_view text, const std::string& source = "truth") {
    using namespace io_detail;
    LineReader r(text, source);
    std::string_view first;
    if (!r.next(first)) {
        r.fail_eof("empty file");
    }
    if (first != "magic=" + std::string(kTruthMagic)) {
        r.fail("bad magic line '" + std::string(first) + "'");
    }
    const auto kv = read_header(r);
    const int k = header_value<int>(kv, "num_classes", r);
    const int known = header_value<int>(kv, "num_known", r);
    const auto count = header_value<std::size_t>(kv, "count", r);
    std::vector<int> truth;
    truth.reserve(count);
    std::string_view line;
    while (r.next(line)) {
        if (line.empty()) {
            continue;
        }
        const int c = parse_number<int>(line, r, "class id");
        if (c < 0 || c >= k) {
            r.fail("class id out of range");
        }
        truth.push_back(c);
    }
    if (truth.size() != count) {
        r.fail_eof("truncated: declared " + std::to_string(count) + " labels, found " +
                   std::to_string(truth.size()));
    }
    return EvalHandle(std::move(truth), k, known);
}

/// Writes the training view to path and the hidden labels to path.truth.
inline void save_dataset(const GcdSplit& split, const EvalHandle& truth, const std::filesystem::path& path) {
    if (truth.truth().size() != split.unlabeled.rows()) {
        throw DimensionError("save_dataset: truth length differs from unlabeled row count");
    }
    io_detail::write_file(path, serialize_dataset(split));
    io_detail::write_file(truth_path(path), serialize_truth(truth));
}

inline GcdSplit load_dataset(const std::filesystem::path& path) {
    return parse_dataset(io_detail::read_file(path), path.string());
}

inline EvalHandle load_truth(const std::filesystem::path& dataset_path) {
    const auto p = truth_path(dataset_path);
    return parse_truth(io_detail::read_file(p), p.string());
}

}  // namespace rpc
