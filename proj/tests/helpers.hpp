#ifndef SEPAL_TEST_HELPERS_HPP
#define SEPAL_TEST_HELPERS_HPP

#include "sepal/core.hpp"
#include "sepal/nn.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

namespace testing_support {

// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() / ("sepal_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline void write_text(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    out << body;
}

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline sepal::SpotRecord spot(const std::string& id, double x, double y, long row, long col, const std::string& slide = "s") {
    return sepal::SpotRecord{id, slide, x, y, row, col};
}

// Visium-style hex lattice: array_col = 2c + (r % 2), pixel spacing 100.
inline std::vector<sepal::SpotRecord> hex_lattice(long rows, long cols) {
    std::vector<sepal::SpotRecord> out;
    for (long r = 0; r < rows; ++r) {
        for (long c = 0; c < cols; ++c) {
            long ac = 2 * c + (r % 2);
            out.push_back(spot("h" + std::to_string(r) + "_" + std::to_string(ac), ac * 50.0, r * 50.0 * std::sqrt(3.0), r, ac));
        }
    }
    sepal::canonicalize_spots(out);
    return out;
}

inline std::vector<sepal::SpotRecord> square_lattice(long rows, long cols, double pitch = 1.0) {
    std::vector<sepal::SpotRecord> out;
    for (long r = 0; r < rows; ++r) {
        for (long c = 0; c < cols; ++c) {
            out.push_back(spot("q" + std::to_string(r) + "_" + std::to_string(c), c * pitch, r * pitch, r, c));
        }
    }
    sepal::canonicalize_spots(out);
    return out;
}

inline std::size_t index_of(const std::vector<sepal::SpotRecord>& spots, long row, long col) {
    for (std::size_t i = 0; i < spots.size(); ++i) {
        if (spots[i].array_row == row && spots[i].array_col == col) {
            return i;
        }
    }
    return spots.size();
}

// Erdos-Renyi edge list with i < j.
inline std::vector<std::pair<std::size_t, std::size_t>> random_edges(std::size_t n, double p, std::mt19937_64& rng) {
    std::bernoulli_distribution keep(p);
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (keep(rng)) {
                edges.emplace_back(i, j);
            }
        }
    }
    return edges;
}

inline sepal::Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1, double hi = 1) {
    std::uniform_real_distribution<double> u(lo, hi);
    sepal::Matrix m(r, c);
    for (auto& v : m.data()) {
        v = u(rng);
    }
    return m;
}

inline sepal::ExpressionMatrix expression(const std::string& slide, std::vector<std::string> genes, std::size_t n_spots,
                                          std::vector<double> values, sepal::Stage stage = sepal::Stage::raw_counts) {
    sepal::ExpressionMatrix m;
    m.slide_id = slide;
    m.gene_ids = std::move(genes);
    for (std::size_t i = 0; i < n_spots; ++i) {
        m.spot_ids.push_back(slide + "_spot" + std::to_string(i));
    }
    m.values = sepal::Matrix(n_spots, m.gene_ids.size(), std::move(values));
    m.stage = stage;
    return m;
}

}

#endif
