#include "fet/tensor_archive.hpp"

#include "fet/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

namespace fet {
namespace {

std::int64_t element_count(const std::vector<std::int64_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

template <typename T>
T to_little_endian(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
        std::memcpy(&v, bytes, sizeof(T));
    }
    return v;
}

std::string dtype_name(TensorArchive::DType d) { return d == TensorArchive::DType::int32 ? "int32" : "float32"; }

// File names are derived from a sequence number; tensor names may be
// arbitrary strings (embedding archives key by instruction text).
std::string file_name_for(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "t%06zu.bin", index);
    return buf;
}

}  // namespace

void TensorArchive::put(const std::string& name, const Eigen::MatrixXd& m) {
    Entry e;
    e.shape = {m.rows(), m.cols()};
    e.data.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) e.data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
    entries_[name] = std::move(e);
}

void TensorArchive::put(const std::string& name, std::vector<std::int64_t> shape, std::vector<double> data,
                        DType dtype) {
    if (element_count(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError("tensor '" + name + "': data size does not match shape");
    entries_[name] = Entry{dtype, std::move(shape), std::move(data)};
}

void TensorArchive::put_ints(const std::string& name, const std::vector<int>& values) {
    put(name, {static_cast<std::int64_t>(values.size())}, std::vector<double>(values.begin(), values.end()),
        DType::int32);
}

const TensorArchive::Entry& TensorArchive::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw NotFoundError("tensor not found in archive: '" + name + "'");
    return it->second;
}

Eigen::MatrixXd TensorArchive::matrix(const std::string& name) const {
    const Entry& e = entry(name);
    std::int64_t cols = e.shape.empty() ? 1 : e.shape.back();
    std::int64_t rows = cols == 0 ? 0 : element_count(e.shape) / cols;
    if (e.shape.size() == 1) {
        rows = 1;
        cols = e.shape[0];
    }
    Eigen::MatrixXd m(rows, cols);
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c) m(r, c) = e.data[static_cast<std::size_t>(r * cols + c)];
    return m;
}

std::vector<int> TensorArchive::ints(const std::string& name) const {
    const Entry& e = entry(name);
    std::vector<int> out;
    out.reserve(e.data.size());
    for (double v : e.data) out.push_back(static_cast<int>(v));
    return out;
}

void TensorArchive::save(const std::filesystem::path& dir) const {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

    nlohmann::json manifest;
    manifest["format"] = "fet-tensor-archive";
    manifest["version"] = 1;
    manifest["byte_order"] = "little";
    manifest["layout"] = "row-major";
    manifest["meta"] = meta_;
    nlohmann::json tensors = nlohmann::json::object();

    std::size_t index = 0;
    for (const auto& [name, e] : entries_) {
        const std::string file = file_name_for(index++);
        std::ofstream out(dir / file, std::ios::binary);
        if (!out) throw IoError("cannot write " + (dir / file).string());
        for (double v : e.data) {
            if (e.dtype == DType::float32) {
                auto f = to_little_endian(static_cast<float>(v));
                out.write(reinterpret_cast<const char*>(&f), sizeof(f));
            } else {
                auto i = to_little_endian(static_cast<std::int32_t>(v));
                out.write(reinterpret_cast<const char*>(&i), sizeof(i));
            }
        }
        if (!out) throw IoError("write failed for " + (dir / file).string());
        tensors[name] = {{"file", file}, {"dtype", dtype_name(e.dtype)}, {"shape", e.shape}};
    }
    manifest["tensors"] = tensors;

    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot write " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << '\n';
    if (!mf) throw IoError("write failed for " + (dir / "manifest.json").string());
}

TensorArchive TensorArchive::load(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream mf(manifest_path);
    if (!mf) throw IoError("cannot open " + manifest_path.string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(manifest_path.string() + ": " + e.what());
    }

    TensorArchive archive;
    try {
        if (manifest.value("byte_order", "little") != "little")
            throw ParseError(manifest_path.string() + ": unsupported byte_order");
        if (manifest.contains("meta")) archive.meta_ = manifest["meta"];
        for (const auto& [name, spec] : manifest.at("tensors").items()) {
            Entry e;
            const std::string dtype = spec.value("dtype", "float32");
            if (dtype == "float32")
                e.dtype = DType::float32;
            else if (dtype == "int32")
                e.dtype = DType::int32;
            else
                throw ParseError(manifest_path.string() + ": tensor '" + name + "' has unsupported dtype " + dtype);
            e.shape = spec.at("shape").get<std::vector<std::int64_t>>();
            const auto count = element_count(e.shape);
            const auto file = dir / spec.at("file").get<std::string>();
            std::ifstream in(file, std::ios::binary);
            if (!in) throw IoError("cannot open " + file.string());
            e.data.resize(static_cast<std::size_t>(count));
            for (std::int64_t i = 0; i < count; ++i) {
                if (e.dtype == DType::float32) {
                    float f;
                    in.read(reinterpret_cast<char*>(&f), sizeof(f));
                    e.data[static_cast<std::size_t>(i)] = to_little_endian(f);
                } else {
                    std::int32_t v;
                    in.read(reinterpret_cast<char*>(&v), sizeof(v));
                    e.data[static_cast<std::size_t>(i)] = to_little_endian(v);
                }
            }
            if (!in) throw IoError(file.string() + ": truncated tensor '" + name + "'");
            archive.entries_[name] = std::move(e);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(manifest_path.string() + ": " + e.what());
    }
    return archive;
}

}  // namespace fet
