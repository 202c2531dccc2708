#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "ssfl/errors.hpp"
#include "ssfl/rng.hpp"
#include "ssfl/tensor.hpp"

namespace ssfl {

struct Dataset {
    Tensor x; // {N,D} vectors or {N,C,H,W} images
    std::vector<int> labels;
    int class_count = 0;

    int size() const { return x.batch(); }
    std::vector<int> input_shape() const { return {x.shape.begin() + 1, x.shape.end()}; }

    std::vector<long long> class_counts() const {
        std::vector<long long> counts(static_cast<std::size_t>(class_count), 0);
        for (int y : labels) ++counts[static_cast<std::size_t>(y)];
        return counts;
    }
};

struct LoadedData {
    Dataset train;
    Dataset test;
};

struct DatasetSource {
    enum class Kind { synthetic_blobs, synthetic_rings, idx_images, csv } kind = Kind::synthetic_blobs;

    // synthetic
    int classes = 10;
    int dims = 16;
    long long train_samples = 10000;
    long long test_samples = 2000;
    std::uint64_t seed = 7;
    double blob_std = 0.9;

    // idx_images
    std::string train_images, train_labels, test_images, test_labels;

    // csv
    std::string csv_path;
    std::string label_column;
    double test_fraction = 0.2;
    std::uint64_t split_seed = 17;
};

inline std::string to_string(DatasetSource::Kind k) {
    switch (k) {
    case DatasetSource::Kind::synthetic_blobs: return "synthetic_blobs";
    case DatasetSource::Kind::synthetic_rings: return "synthetic_rings";
    case DatasetSource::Kind::idx_images: return "idx_images";
    case DatasetSource::Kind::csv: return "csv";
    }
    return "?";
}

inline DatasetSource::Kind dataset_kind_from_string(const std::string& s) {
    if (s == "synthetic_blobs") return DatasetSource::Kind::synthetic_blobs;
    if (s == "synthetic_rings") return DatasetSource::Kind::synthetic_rings;
    if (s == "idx_images") return DatasetSource::Kind::idx_images;
    if (s == "csv") return DatasetSource::Kind::csv;
    throw ConfigError("unknown dataset kind: " + s);
}

namespace detail {

inline Dataset make_blobs(int classes, int dims, long long samples, const std::vector<double>& centers,
                          double blob_std, RngStream& noise) {
    Dataset out;
    out.class_count = classes;
    out.x = Tensor({static_cast<int>(samples), dims});
    out.labels.resize(static_cast<std::size_t>(samples));
    for (long long i = 0; i < samples; ++i) {
        const int y = static_cast<int>(i % classes);
        out.labels[static_cast<std::size_t>(i)] = y;
        double* row = out.x.sample(static_cast<int>(i));
        const double* center = centers.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(dims);
        for (int k = 0; k < dims; ++k) row[k] = center[k] + blob_std * noise.normal();
    }
    return out;
}

inline Dataset make_rings(int classes, long long samples, RngStream& noise) {
    Dataset out;
    out.class_count = classes;
    out.x = Tensor({static_cast<int>(samples), 2});
    out.labels.resize(static_cast<std::size_t>(samples));
    for (long long i = 0; i < samples; ++i) {
        const int y = static_cast<int>(i % classes);
        const double radius = static_cast<double>(y + 1) / classes;
        const double theta = noise.uniform_double() * 2.0 * std::numbers::pi;
        out.labels[static_cast<std::size_t>(i)] = y;
        double* row = out.x.sample(static_cast<int>(i));
        row[0] = radius * std::cos(theta) + 0.03 * noise.normal();
        row[1] = radius * std::sin(theta) + 0.03 * noise.normal();
    }
    return out;
}

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("idx: truncated header in " + path);
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

struct IdxArray {
    std::vector<std::uint32_t> dims;
    std::vector<unsigned char> data;
};

inline IdxArray read_idx(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("idx: cannot open " + path);
    const std::uint32_t magic = read_be32(in, path);
    if ((magic & 0xFFFF0000u) != 0 || ((magic >> 8) & 0xFF) != 0x08)
        throw FormatError("idx: bad magic number in " + path);
    const std::uint32_t ndim = magic & 0xFF;
    if (ndim < 1 || ndim > 3) throw FormatError("idx: unsupported rank in " + path);
    IdxArray out;
    std::size_t total = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        out.dims.push_back(read_be32(in, path));
        total *= out.dims.back();
    }
    out.data.resize(total);
    in.read(reinterpret_cast<char*>(out.data.data()), static_cast<std::streamsize>(total));
    if (!in) throw FormatError("idx: truncated data in " + path);
    return out;
}

inline Dataset idx_pair_to_dataset(const std::string& images_path, const std::string& labels_path) {
    const auto images = read_idx(images_path);
    const auto labels = read_idx(labels_path);
    if (images.dims.size() != 3) throw FormatError("idx: " + images_path + " is not an image array");
    if (labels.dims.size() != 1) throw FormatError("idx: " + labels_path + " is not a label array");
    if (images.dims[0] != labels.dims[0])
        throw FormatError("idx: image/label counts differ between " + images_path + " and " + labels_path);

    Dataset out;
    const int n = static_cast<int>(images.dims[0]);
    const int h = static_cast<int>(images.dims[1]);
    const int w = static_cast<int>(images.dims[2]);
    out.x = Tensor({n, 1, h, w});
    for (std::size_t i = 0; i < images.data.size(); ++i) out.x.data[i] = images.data[i] / 255.0;
    out.labels.resize(static_cast<std::size_t>(n));
    int max_label = 0;
    for (int i = 0; i < n; ++i) {
        out.labels[static_cast<std::size_t>(i)] = labels.data[static_cast<std::size_t>(i)];
        max_label = std::max(max_label, out.labels[static_cast<std::size_t>(i)]);
    }
    out.class_count = max_label + 1;
    return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

} // namespace detail

/// Loads train and test splits. Synthetic kinds draw both splits from one
/// generating distribution with disjoint noise streams; file-backed kinds
/// validate labels and formats.
inline LoadedData load_dataset(const DatasetSource& src) {
    LoadedData out;
    switch (src.kind) {
    case DatasetSource::Kind::synthetic_blobs: {
        if (src.classes < 2 || src.dims < 1 || src.train_samples < src.classes)
            throw ConfigError("synthetic_blobs: need classes >= 2, dims >= 1 and enough samples");
        RngStream center_rng{stream_tag::kDataset, src.seed, 0};
        std::vector<double> centers(static_cast<std::size_t>(src.classes) * static_cast<std::size_t>(src.dims));
        for (auto& c : centers) c = center_rng.normal();
        RngStream train_rng{stream_tag::kDataset, src.seed, 1};
        RngStream test_rng{stream_tag::kDataset, src.seed, 2};
        out.train = detail::make_blobs(src.classes, src.dims, src.train_samples, centers, src.blob_std, train_rng);
        out.test = detail::make_blobs(src.classes, src.dims, src.test_samples, centers, src.blob_std, test_rng);
        break;
    }
    case DatasetSource::Kind::synthetic_rings: {
        if (src.classes < 2 || src.train_samples < src.classes)
            throw ConfigError("synthetic_rings: need classes >= 2 and enough samples");
        RngStream train_rng{stream_tag::kDataset, src.seed, 3};
        RngStream test_rng{stream_tag::kDataset, src.seed, 4};
        out.train = detail::make_rings(src.classes, src.train_samples, train_rng);
        out.test = detail::make_rings(src.classes, src.test_samples, test_rng);
        break;
    }
    case DatasetSource::Kind::idx_images: {
        out.train = detail::idx_pair_to_dataset(src.train_images, src.train_labels);
        out.test = detail::idx_pair_to_dataset(src.test_images, src.test_labels);
        const int classes = std::max(out.train.class_count, out.test.class_count);
        out.train.class_count = classes;
        out.test.class_count = classes;
        break;
    }
    case DatasetSource::Kind::csv: {
        std::ifstream in(src.csv_path);
        if (!in) throw FormatError("csv: cannot open " + src.csv_path);
        std::string line;
        if (!std::getline(in, line)) throw FormatError("csv: empty file " + src.csv_path);
        const auto header = detail::split_csv_line(line);
        int label_col = -1;
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == src.label_column) label_col = static_cast<int>(i);
        if (label_col < 0) throw FormatError("csv: label column '" + src.label_column + "' not found");

        std::vector<std::vector<double>> rows;
        std::vector<int> labels;
        int max_label = 0;
        int lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto fields = detail::split_csv_line(line);
            if (fields.size() != header.size())
                throw FormatError("csv: wrong field count at line " + std::to_string(lineno));
            std::vector<double> row;
            for (std::size_t i = 0; i < fields.size(); ++i) {
                char* end = nullptr;
                const double v = std::strtod(fields[i].c_str(), &end);
                if (end == fields[i].c_str() || *end != '\0')
                    throw FormatError("csv: non-numeric field at line " + std::to_string(lineno));
                if (static_cast<int>(i) == label_col) {
                    const double r = std::round(v);
                    if (std::abs(v - r) > 1e-9 || r < 0)
                        throw InvalidInputError("csv: label at line " + std::to_string(lineno) +
                                                " is not a non-negative integer");
                    labels.push_back(static_cast<int>(r));
                    max_label = std::max(max_label, static_cast<int>(r));
                } else {
                    row.push_back(v);
                }
            }
            rows.push_back(std::move(row));
        }
        if (rows.size() < 2) throw FormatError("csv: not enough rows in " + src.csv_path);

        const int n = static_cast<int>(rows.size());
        const int d = static_cast<int>(rows[0].size());
        RngStream split_rng{stream_tag::kDataset, src.split_seed, 5};
        const int test_n = std::max(1, static_cast<int>(std::lround(src.test_fraction * n)));
        auto order = split_rng.sample_without_replacement(n, n);
        auto fill = [&](Dataset& ds, int begin, int count) {
            ds.x = Tensor({count, d});
            ds.labels.resize(static_cast<std::size_t>(count));
            for (int i = 0; i < count; ++i) {
                const int srcrow = order[static_cast<std::size_t>(begin + i)];
                std::copy(rows[static_cast<std::size_t>(srcrow)].begin(), rows[static_cast<std::size_t>(srcrow)].end(),
                          ds.x.sample(i));
                ds.labels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(srcrow)];
            }
            ds.class_count = max_label + 1;
        };
        fill(out.test, 0, test_n);
        fill(out.train, test_n, n - test_n);
        break;
    }
    }
    for (const Dataset* ds : {&out.train, &out.test}) {
        for (int y : ds->labels)
            if (y < 0 || y >= ds->class_count) throw InvalidInputError("dataset: label out of range");
    }
    return out;
}

} // namespace ssfl
