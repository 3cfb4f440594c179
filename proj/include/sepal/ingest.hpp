#ifndef SEPAL_INGEST_HPP
#define SEPAL_INGEST_HPP

#include "core.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

/**
 * @file ingest.hpp
 *
 * @brief Readers and writers for every on-disk artifact.
 *
 * All text files are tab-separated, LF-terminated and start with `#` comment lines;
 * the first comment is always the format version.
 * Numbers are written in their shortest round-trip representation, so re-reading a file reproduces the values exactly.
 */

namespace sepal {

inline constexpr const char* format_version = "1";
inline constexpr const char* checkpoint_magic = "SEPALCKPT1";

/**
 * @brief Comment-line metadata of a text file.
 */
struct FileHeader {
    std::string format_version;
    std::string kind;
    std::map<std::string, std::string> fields;
    std::vector<std::string> columns;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find('\t', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

inline std::string where(const std::string& path, std::size_t line) {
    return path + ":" + std::to_string(line);
}

inline double parse_real(std::string_view text, const std::string& path, std::size_t line) {
    double value = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), value);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size() || text.empty()) {
        // from_chars does not accept a leading '+'.
        if (!text.empty() && text.front() == '+') {
            return parse_real(text.substr(1), path, line);
        }
        throw Error(ErrorKind::MalformedRow, where(path, line) + ": '" + std::string(text) + "' is not a number");
    }
    if (!std::isfinite(value)) {
        throw Error(ErrorKind::NonFiniteValue, where(path, line) + ": non-finite value '" + std::string(text) + "'");
    }
    return value;
}

inline long parse_integer(std::string_view text, const std::string& path, std::size_t line) {
    long value = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), value);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size() || text.empty()) {
        throw Error(ErrorKind::MalformedRow, where(path, line) + ": '" + std::string(text) + "' is not an integer");
    }
    return value;
}

/**
 * Lines of a text file with `#` comments split off.
 */
struct TextFile {
    FileHeader header;
    std::vector<std::pair<std::size_t, std::string>> rows; // (line number, content)
};

inline TextFile read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::IoFailure, "cannot open '" + path + "' for reading");
    }
    TextFile out;
    std::string line;
    std::size_t lineno = 0;
    bool have_columns = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        if (line.front() == '#') {
            std::string_view body(line);
            body.remove_prefix(1);
            auto eq = body.find('=');
            if (eq != std::string_view::npos) {
                std::string key(trim(body.substr(0, eq))), value(trim(body.substr(eq + 1)));
                if (key == "sepal_format") {
                    out.header.format_version = value;
                } else if (key == "kind") {
                    out.header.kind = value;
                } else {
                    out.header.fields[key] = value;
                }
            }
            continue;
        }
        if (!have_columns) {
            for (auto c : split_tabs(line)) {
                out.header.columns.emplace_back(c);
            }
            have_columns = true;
            continue;
        }
        out.rows.emplace_back(lineno, std::move(line));
    }
    if (!have_columns) {
        throw Error(ErrorKind::MalformedRow, "'" + path + "' has no header line");
    }
    return out;
}

inline void write_file(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorKind::IoFailure, "cannot open '" + path + "' for writing");
    }
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    out.close();
    if (!out) {
        throw Error(ErrorKind::IoFailure, "failed writing '" + path + "'");
    }
}

inline std::string preamble(const std::string& kind, const std::vector<std::pair<std::string, std::string>>& fields = {}) {
    std::string out = std::string("#sepal_format=") + format_version + "\n#kind=" + kind + "\n";
    for (const auto& [k, v] : fields) {
        out += "#" + k + "=" + v + "\n";
    }
    return out;
}

}

/**
 * Shortest decimal representation that parses back to exactly `value`.
 */
inline std::string format_real(double value) {
    std::array<char, 64> buffer;
    auto res = std::to_chars(buffer.data(), buffer.data() + buffer.size(), value);
    return std::string(buffer.data(), res.ptr);
}

/**
 * @brief A generic string table, used for reports.
 */
struct Table {
    std::string kind;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    friend bool operator==(const Table&, const Table&) = default;
};

inline void write_table(const std::string& path, const Table& table) {
    std::string body = detail::preamble(table.kind);
    auto join = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) {
                body += '\t';
            }
            body += cells[i];
        }
        body += '\n';
    };
    join(table.columns);
    for (const auto& r : table.rows) {
        if (r.size() != table.columns.size()) {
            throw Error(ErrorKind::MalformedRow, "table row width does not match header for '" + path + "'");
        }
        join(r);
    }
    detail::write_file(path, body);
}

inline Table read_table(const std::string& path) {
    auto file = detail::read_text(path);
    Table out;
    out.kind = file.header.kind;
    out.columns = file.header.columns;
    for (const auto& [lineno, line] : file.rows) {
        auto cells = detail::split_tabs(line);
        if (cells.size() != out.columns.size()) {
            throw Error(ErrorKind::MalformedRow, detail::where(path, lineno) + ": expected " + std::to_string(out.columns.size()) + " columns, got " + std::to_string(cells.size()));
        }
        out.rows.emplace_back(cells.begin(), cells.end());
    }
    return out;
}

/**
 * Read a spot coordinate table.
 *
 * The header must be `spot_id slide_id pixel_x pixel_y array_row array_col`.
 * Records are returned in canonical order.
 */
inline std::vector<SpotRecord> read_coordinates(const std::string& path) {
    static const std::vector<std::string> expected{"spot_id", "slide_id", "pixel_x", "pixel_y", "array_row", "array_col"};
    auto file = detail::read_text(path);
    if (file.header.columns != expected) {
        throw Error(ErrorKind::MalformedRow, "'" + path + "' does not have the coordinate header");
    }
    std::vector<SpotRecord> out;
    out.reserve(file.rows.size());
    for (const auto& [lineno, line] : file.rows) {
        auto cells = detail::split_tabs(line);
        if (cells.size() != expected.size()) {
            throw Error(ErrorKind::MalformedRow, detail::where(path, lineno) + ": expected 6 columns, got " + std::to_string(cells.size()));
        }
        SpotRecord rec;
        rec.spot_id = cells[0];
        rec.slide_id = cells[1];
        rec.pixel_x = detail::parse_real(cells[2], path, lineno);
        rec.pixel_y = detail::parse_real(cells[3], path, lineno);
        rec.array_row = detail::parse_integer(cells[4], path, lineno);
        rec.array_col = detail::parse_integer(cells[5], path, lineno);
        out.push_back(std::move(rec));
    }
    canonicalize_spots(out);
    return out;
}

inline void write_coordinates(const std::string& path, const std::vector<SpotRecord>& spots) {
    std::string body = detail::preamble("coordinates");
    body += "spot_id\tslide_id\tpixel_x\tpixel_y\tarray_row\tarray_col\n";
    for (const auto& s : spots) {
        body += s.spot_id + "\t" + s.slide_id + "\t" + format_real(s.pixel_x) + "\t" + format_real(s.pixel_y) + "\t" +
            std::to_string(s.array_row) + "\t" + std::to_string(s.array_col) + "\n";
    }
    detail::write_file(path, body);
}

namespace detail {

struct LabeledMatrix {
    FileHeader header;
    std::vector<std::string> row_ids;
    std::vector<std::string> col_ids;
    Matrix values;
};

inline LabeledMatrix read_labeled(const std::string& path, ErrorKind width_error) {
    auto file = read_text(path);
    if (file.header.columns.empty() || file.header.columns.front() != "spot_id") {
        throw Error(ErrorKind::MalformedRow, "'" + path + "' must start with a spot_id column");
    }
    LabeledMatrix out;
    out.col_ids.assign(file.header.columns.begin() + 1, file.header.columns.end());
    const std::size_t width = out.col_ids.size();
    std::vector<double> data;
    data.reserve(width * file.rows.size());
    for (const auto& [lineno, line] : file.rows) {
        auto cells = split_tabs(line);
        if (cells.size() != width + 1) {
            throw Error(width_error, where(path, lineno) + ": expected " + std::to_string(width) + " values, got " + std::to_string(cells.size() - 1));
        }
        out.row_ids.emplace_back(cells[0]);
        for (std::size_t c = 1; c < cells.size(); ++c) {
            data.push_back(parse_real(cells[c], path, lineno));
        }
    }
    out.values = Matrix(out.row_ids.size(), width, std::move(data));
    out.header = std::move(file.header);
    return out;
}

template<typename T>
std::string format_labeled(const std::string& prefix, const std::vector<std::string>& row_ids, const std::vector<std::string>& col_ids, const DenseMatrix<T>& values) {
    std::string body = prefix + "spot_id";
    for (const auto& c : col_ids) {
        body += '\t';
        body += c;
    }
    body += '\n';
    for (std::size_t r = 0; r < row_ids.size(); ++r) {
        body += row_ids[r];
        for (std::size_t c = 0; c < col_ids.size(); ++c) {
            body += '\t';
            if constexpr (std::is_same_v<T, double>) {
                body += format_real(values(r, c));
            } else {
                body += (values(r, c) ? '1' : '0');
            }
        }
        body += '\n';
    }
    return body;
}

}

/**
 * Read an expression table. The stage is taken from a `#stage=` comment and defaults to `raw_counts`.
 * The slide ID comes from a `#slide_id=` comment when present.
 */
inline ExpressionMatrix read_expression(const std::string& path) {
    auto lab = detail::read_labeled(path, ErrorKind::MalformedRow);
    ExpressionMatrix out;
    out.stage = Stage::raw_counts;
    if (auto it = lab.header.fields.find("stage"); it != lab.header.fields.end()) {
        auto st = parse_stage(it->second);
        if (!st) {
            throw Error(ErrorKind::MalformedRow, "'" + path + "' has unknown stage '" + it->second + "'");
        }
        out.stage = *st;
    }
    if (auto it = lab.header.fields.find("slide_id"); it != lab.header.fields.end()) {
        out.slide_id = it->second;
    }
    out.gene_ids = std::move(lab.col_ids);
    out.spot_ids = std::move(lab.row_ids);
    out.values = std::move(lab.values);
    out.validate();
    return out;
}

inline void write_expression(const std::string& path, const ExpressionMatrix& matrix) {
    matrix.validate();
    auto prefix = detail::preamble("expression", {{"stage", to_string(matrix.stage)}, {"slide_id", matrix.slide_id}});
    detail::write_file(path, detail::format_labeled(prefix, matrix.spot_ids, matrix.gene_ids, matrix.values));
}

/**
 * Read an embedding table whose header is `spot_id e0 e1 ... e{d-1}`.
 */
inline EmbeddingTable read_embeddings(const std::string& path) {
    auto lab = detail::read_labeled(path, ErrorKind::WidthMismatch);
    for (std::size_t i = 0; i < lab.col_ids.size(); ++i) {
        if (lab.col_ids[i] != "e" + std::to_string(i)) {
            throw Error(ErrorKind::MalformedRow, "'" + path + "' embedding column " + std::to_string(i) + " must be named e" + std::to_string(i));
        }
    }
    if (lab.col_ids.empty()) {
        throw Error(ErrorKind::WidthMismatch, "'" + path + "' declares no embedding columns");
    }
    EmbeddingTable out;
    if (auto it = lab.header.fields.find("slide_id"); it != lab.header.fields.end()) {
        out.slide_id = it->second;
    }
    out.spot_ids = std::move(lab.row_ids);
    out.vectors = std::move(lab.values);
    return out;
}

inline void write_embeddings(const std::string& path, const EmbeddingTable& table) {
    std::vector<std::string> cols;
    for (std::size_t i = 0; i < table.d_emb(); ++i) {
        cols.push_back("e" + std::to_string(i));
    }
    auto prefix = detail::preamble("embeddings", {{"slide_id", table.slide_id}});
    detail::write_file(path, detail::format_labeled(prefix, table.spot_ids, cols, table.vectors));
}

inline ImputationMask read_mask(const std::string& path) {
    auto lab = detail::read_labeled(path, ErrorKind::MalformedRow);
    ImputationMask out;
    if (auto it = lab.header.fields.find("slide_id"); it != lab.header.fields.end()) {
        out.slide_id = it->second;
    }
    out.gene_ids = std::move(lab.col_ids);
    out.spot_ids = std::move(lab.row_ids);
    out.values = BoolMatrix(lab.values.rows(), lab.values.cols());
    for (std::size_t i = 0; i < lab.values.size(); ++i) {
        double v = lab.values.data()[i];
        if (v != 0 && v != 1) {
            throw Error(ErrorKind::MalformedRow, "'" + path + "' mask entries must be 0 or 1");
        }
        out.values.data()[i] = static_cast<std::uint8_t>(v);
    }
    return out;
}

inline void write_mask(const std::string& path, const ImputationMask& mask) {
    auto prefix = detail::preamble("mask", {{"slide_id", mask.slide_id}});
    detail::write_file(path, detail::format_labeled(prefix, mask.spot_ids, mask.gene_ids, mask.values));
}

/**
 * Read a dataset manifest.
 *
 * The format is flat `key = value` lines plus `[slide.<id>]` sections holding `coords`, `expr`, `emb` and `split`.
 * Relative paths are resolved against the manifest's directory.
 * Filtering thresholds are mandatory; there are no defaults for them.
 */
inline DatasetManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorKind::IoFailure, "cannot open manifest '" + path + "'");
    }
    const auto base = std::filesystem::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        return (fp.is_absolute() ? fp : base / fp).lexically_normal().string();
    };

    DatasetManifest out;
    std::map<std::string, std::string> top;
    std::vector<std::pair<std::string, std::map<std::string, std::string>>> sections;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto body = detail::trim(line);
        if (body.empty() || body.front() == '#') {
            continue;
        }
        if (body.front() == '[') {
            if (body.back() != ']' || body.substr(0, 7) != "[slide.") {
                throw Error(ErrorKind::MalformedRow, detail::where(path, lineno) + ": expected [slide.<id>]");
            }
            sections.emplace_back(std::string(body.substr(7, body.size() - 8)), std::map<std::string, std::string>{});
            continue;
        }
        auto eq = body.find('=');
        if (eq == std::string_view::npos) {
            throw Error(ErrorKind::MalformedRow, detail::where(path, lineno) + ": expected key = value");
        }
        std::string key(detail::trim(body.substr(0, eq)));
        std::string value(detail::trim(body.substr(eq + 1)));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
            value = value.substr(1, value.size() - 2);
        }
        auto& target = sections.empty() ? top : sections.back().second;
        target[key] = value;
    }

    auto take = [&](const std::string& key) -> std::string {
        auto it = top.find(key);
        if (it == top.end()) {
            throw Error(ErrorKind::InvalidConfig, "manifest '" + path + "' is missing required key '" + key + "'");
        }
        return it->second;
    };
    auto number = [&](const std::string& key) {
        auto v = take(key);
        if (v == "inf" || v == "Inf" || v == "infinity") {
            return std::numeric_limits<double>::infinity();
        }
        double out = 0;
        auto res = std::from_chars(v.data(), v.data() + v.size(), out);
        if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
            throw Error(ErrorKind::InvalidConfig, "manifest key '" + key + "' is not a number: '" + v + "'");
        }
        return out;
    };

    out.name = top.count("name") ? top["name"] : std::filesystem::path(path).stem().string();
    auto geom = parse_geometry(take("geometry"));
    if (!geom) {
        throw Error(ErrorKind::InvalidConfig, "unknown geometry '" + top["geometry"] + "'");
    }
    out.geometry = *geom;
    out.thresholds.eps_total = number("eps_total");
    out.thresholds.eps_wsi = number("eps_wsi");
    out.thresholds.min_spot_counts = number("count_min_spot");
    out.thresholds.max_spot_counts = number("count_max_spot");
    out.thresholds.min_gene_counts = number("count_min_gene");
    out.thresholds.max_gene_counts = number("count_max_gene");
    if (top.count("n_genes_select")) {
        double n = number("n_genes_select");
        if (n < 1 || n != std::floor(n)) {
            throw Error(ErrorKind::InvalidConfig, "n_genes_select must be a positive integer");
        }
        out.n_genes_select = static_cast<std::size_t>(n);
    }
    if (top.count("center_slides")) {
        const auto& v = top["center_slides"];
        if (v != "true" && v != "false") {
            throw Error(ErrorKind::InvalidConfig, "center_slides must be true or false");
        }
        out.center_slides = (v == "true");
    }
    if (top.count("gene_lengths")) {
        out.gene_lengths_path = resolve(top["gene_lengths"]);
    }

    for (auto& [id, keys] : sections) {
        SlideEntry e;
        e.slide_id = id;
        for (const char* k : {"coords", "expr", "emb", "split"}) {
            if (!keys.count(k)) {
                throw Error(ErrorKind::InvalidConfig, "slide '" + id + "' is missing key '" + k + "'");
            }
        }
        e.coords_path = resolve(keys["coords"]);
        e.expr_path = resolve(keys["expr"]);
        e.emb_path = resolve(keys["emb"]);
        auto split = parse_split(keys["split"]);
        if (!split) {
            throw Error(ErrorKind::InvalidConfig, "slide '" + id + "' has unknown split '" + keys["split"] + "'");
        }
        e.split = *split;
        out.slides.push_back(std::move(e));
    }
    out.validate();
    return out;
}

/**
 * Write a manifest. Paths are written as given, so callers wanting a relocatable manifest should pass relative paths.
 */
inline void write_manifest(const std::string& path, const DatasetManifest& m) {
    auto num = [](double v) { return std::isinf(v) ? std::string("inf") : format_real(v); };
    std::string body = std::string("# sepal_format=") + format_version + "\n";
    body += "name = " + m.name + "\n";
    body += std::string("geometry = ") + to_string(m.geometry) + "\n";
    body += "n_genes_select = " + std::to_string(m.n_genes_select) + "\n";
    body += "eps_total = " + num(m.thresholds.eps_total) + "\n";
    body += "eps_wsi = " + num(m.thresholds.eps_wsi) + "\n";
    body += "count_min_spot = " + num(m.thresholds.min_spot_counts) + "\n";
    body += "count_max_spot = " + num(m.thresholds.max_spot_counts) + "\n";
    body += "count_min_gene = " + num(m.thresholds.min_gene_counts) + "\n";
    body += "count_max_gene = " + num(m.thresholds.max_gene_counts) + "\n";
    body += std::string("center_slides = ") + (m.center_slides ? "true" : "false") + "\n";
    if (!m.gene_lengths_path.empty()) {
        body += "gene_lengths = " + m.gene_lengths_path + "\n";
    }
    for (const auto& e : m.slides) {
        body += "\n[slide." + e.slide_id + "]\n";
        body += "coords = " + e.coords_path + "\n";
        body += "expr = " + e.expr_path + "\n";
        body += "emb = " + e.emb_path + "\n";
        body += std::string("split = ") + to_string(e.split) + "\n";
    }
    detail::write_file(path, body);
}

/**
 * @brief Named parameter tensors plus free-form metadata, as stored in a checkpoint file.
 */
struct Checkpoint {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::pair<std::string, Matrix>> tensors;

    const std::string* find_meta(const std::string& key) const {
        for (const auto& [k, v] : meta) {
            if (k == key) {
                return &v;
            }
        }
        return nullptr;
    }

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/**
 * Checkpoint layout: the magic line, then `meta <key> <value>` lines, then for each tensor
 * a `tensor <name> <rows> <cols>` line followed by one line of tab-separated values per row.
 */
inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string body = std::string(checkpoint_magic) + "\n";
    for (const auto& [k, v] : ckpt.meta) {
        body += "meta\t" + k + "\t" + v + "\n";
    }
    for (const auto& [name, t] : ckpt.tensors) {
        body += "tensor\t" + name + "\t" + std::to_string(t.rows()) + "\t" + std::to_string(t.cols()) + "\n";
        for (std::size_t r = 0; r < t.rows(); ++r) {
            for (std::size_t c = 0; c < t.cols(); ++c) {
                if (c) {
                    body += '\t';
                }
                body += format_real(t(r, c));
            }
            body += '\n';
        }
    }
    detail::write_file(path, body);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::IoFailure, "cannot open checkpoint '" + path + "'");
    }
    std::string line;
    if (!std::getline(in, line) || line != checkpoint_magic) {
        throw Error(ErrorKind::MalformedRow, "'" + path + "' is not a checkpoint (bad magic)");
    }
    Checkpoint out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        auto cells = detail::split_tabs(line);
        if (cells[0] == "meta" && cells.size() == 3) {
            out.meta.emplace_back(std::string(cells[1]), std::string(cells[2]));
        } else if (cells[0] == "tensor" && cells.size() == 4) {
            std::string name(cells[1]); // cells view `line`, which is reused below
            auto rows = static_cast<std::size_t>(detail::parse_integer(cells[2], path, lineno));
            auto cols = static_cast<std::size_t>(detail::parse_integer(cells[3], path, lineno));
            Matrix t(rows, cols);
            for (std::size_t r = 0; r < rows; ++r) {
                if (!std::getline(in, line)) {
                    throw Error(ErrorKind::MalformedRow, "'" + path + "' truncated in tensor '" + name + "'");
                }
                ++lineno;
                auto vals = detail::split_tabs(line);
                if (vals.size() != cols) {
                    throw Error(ErrorKind::WidthMismatch, detail::where(path, lineno) + ": tensor row width mismatch");
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    t(r, c) = detail::parse_real(vals[c], path, lineno);
                }
            }
            out.tensors.emplace_back(std::move(name), std::move(t));
        } else {
            throw Error(ErrorKind::MalformedRow, detail::where(path, lineno) + ": unexpected checkpoint line");
        }
    }
    return out;
}

namespace detail {

// Anchors of a perceptually uniform blue-green-yellow ramp; expanded to 256 entries by linear interpolation.
inline std::array<std::array<std::uint8_t, 3>, 256> build_ramp() {
    static constexpr double anchors[9][3] = {
        {68, 1, 84}, {71, 44, 122}, {59, 81, 139}, {44, 113, 142}, {33, 144, 141},
        {39, 173, 129}, {92, 200, 99}, {170, 220, 50}, {253, 231, 37}
    };
    std::array<std::array<std::uint8_t, 3>, 256> ramp{};
    for (int i = 0; i < 256; ++i) {
        double pos = i / 255.0 * 8.0;
        int lo = std::min(7, static_cast<int>(pos));
        double frac = pos - lo;
        for (int c = 0; c < 3; ++c) {
            double v = anchors[lo][c] + (anchors[lo + 1][c] - anchors[lo][c]) * frac;
            ramp[i][c] = static_cast<std::uint8_t>(std::lround(v));
        }
    }
    return ramp;
}

}

/**
 * Colour ramp used by heatmaps, indexed from low (0) to high (255).
 */
inline const std::array<std::array<std::uint8_t, 3>, 256>& heatmap_ramp() {
    static const auto ramp = detail::build_ramp();
    return ramp;
}

/**
 * Render per-spot values as discs on a binary PPM image at `path`, and write the raw values on the array grid to a sibling `.csv`.
 *
 * Colours are scaled to the [min, max] of the non-missing values; missing spots are drawn gray.
 * The disc radius is half the minimum inter-spot pixel distance.
 */
inline void write_heatmap(const std::vector<SpotRecord>& spots, const std::vector<std::optional<double>>& values, const std::string& path) {
    if (spots.size() != values.size()) {
        throw Error(ErrorKind::ShapeMismatch, "heatmap needs one value per spot");
    }
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& v : values) {
        if (v) {
            if (!std::isfinite(*v)) {
                throw Error(ErrorKind::NonFiniteValue, "heatmap value is not finite");
            }
            lo = std::min(lo, *v);
            hi = std::max(hi, *v);
        }
    }
    if (!std::isfinite(lo)) {
        throw Error(ErrorKind::EmptySlide, "no values to draw for '" + path + "'");
    }

    double min_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < spots.size(); ++i) {
        for (std::size_t j = i + 1; j < spots.size(); ++j) {
            double d = std::hypot(spots[i].pixel_x - spots[j].pixel_x, spots[i].pixel_y - spots[j].pixel_y);
            if (d > 0) {
                min_dist = std::min(min_dist, d);
            }
        }
    }

    // Scale so neighbouring spots are 12 px apart, giving 6 px discs.
    constexpr double spacing_px = 12.0;
    const double scale = std::isfinite(min_dist) ? spacing_px / min_dist : 1.0;
    const double radius = spacing_px / 2.0;
    const long margin = static_cast<long>(std::ceil(radius)) + 1;

    double min_x = spots.front().pixel_x, max_x = min_x, min_y = spots.front().pixel_y, max_y = min_y;
    for (const auto& s : spots) {
        min_x = std::min(min_x, s.pixel_x);
        max_x = std::max(max_x, s.pixel_x);
        min_y = std::min(min_y, s.pixel_y);
        max_y = std::max(max_y, s.pixel_y);
    }
    const long width = static_cast<long>(std::ceil((max_x - min_x) * scale)) + 2 * margin + 1;
    const long height = static_cast<long>(std::ceil((max_y - min_y) * scale)) + 2 * margin + 1;

    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width * height * 3), 255);
    const auto& ramp = heatmap_ramp();
    for (std::size_t i = 0; i < spots.size(); ++i) {
        std::array<std::uint8_t, 3> color{128, 128, 128};
        if (values[i]) {
            int idx = (hi > lo) ? static_cast<int>(std::floor((*values[i] - lo) / (hi - lo) * 255.0 + 0.5)) : 0;
            color = ramp[std::clamp(idx, 0, 255)];
        }
        const double cx = (spots[i].pixel_x - min_x) * scale + margin;
        const double cy = (spots[i].pixel_y - min_y) * scale + margin;
        const long x0 = static_cast<long>(std::floor(cx - radius)), x1 = static_cast<long>(std::ceil(cx + radius));
        const long y0 = static_cast<long>(std::floor(cy - radius)), y1 = static_cast<long>(std::ceil(cy + radius));
        for (long y = std::max(0L, y0); y <= std::min(height - 1, y1); ++y) {
            for (long x = std::max(0L, x0); x <= std::min(width - 1, x1); ++x) {
                const double dx = x - cx, dy = y - cy;
                if (dx * dx + dy * dy <= radius * radius) {
                    auto* px = &pixels[static_cast<std::size_t>((y * width + x) * 3)];
                    px[0] = color[0];
                    px[1] = color[1];
                    px[2] = color[2];
                }
            }
        }
    }

    std::string body = "P6\n# sepal_format=" + std::string(format_version) + "\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    body.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
    detail::write_file(path, body);

    // Grid CSV: one row per array_row, one column per array_col; empty where no spot, NA where missing.
    long rmin = spots.front().array_row, rmax = rmin, cmin = spots.front().array_col, cmax = cmin;
    for (const auto& s : spots) {
        rmin = std::min(rmin, s.array_row);
        rmax = std::max(rmax, s.array_row);
        cmin = std::min(cmin, s.array_col);
        cmax = std::max(cmax, s.array_col);
    }
    const std::size_t nr = static_cast<std::size_t>(rmax - rmin + 1), nc = static_cast<std::size_t>(cmax - cmin + 1);
    std::vector<std::string> grid(nr * nc);
    for (std::size_t i = 0; i < spots.size(); ++i) {
        auto& cell = grid[static_cast<std::size_t>(spots[i].array_row - rmin) * nc + static_cast<std::size_t>(spots[i].array_col - cmin)];
        cell = values[i] ? format_real(*values[i]) : "NA";
    }
    std::string csv = "#sepal_format=" + std::string(format_version) + "\n#kind=heatmap_grid\n#row_origin=" + std::to_string(rmin) + "\n#col_origin=" + std::to_string(cmin) + "\n";
    csv += "array_row";
    for (long c = cmin; c <= cmax; ++c) {
        csv += "," + std::to_string(c);
    }
    csv += '\n';
    for (std::size_t r = 0; r < nr; ++r) {
        csv += std::to_string(rmin + static_cast<long>(r));
        for (std::size_t c = 0; c < nc; ++c) {
            csv += ',';
            csv += grid[r * nc + c];
        }
        csv += '\n';
    }
    auto csv_path = std::filesystem::path(path).replace_extension(".csv").string();
    detail::write_file(csv_path, csv);
}

}

#endif
