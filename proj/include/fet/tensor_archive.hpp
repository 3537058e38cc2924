#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace fet {

// A named collection of dense tensors persisted as a directory holding
// manifest.json plus one raw little-endian binary file per tensor (row-major).
// Reals are stored as float32, indices as int32.
class TensorArchive {
public:
    enum class DType { float32, int32 };

    struct Entry {
        DType dtype = DType::float32;
        std::vector<std::int64_t> shape;
        std::vector<double> data;  // row-major; ints are stored exactly
    };

    void put(const std::string& name, const Eigen::MatrixXd& m);
    void put(const std::string& name, std::vector<std::int64_t> shape, std::vector<double> data,
             DType dtype = DType::float32);
    void put_ints(const std::string& name, const std::vector<int>& values);

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    const Entry& entry(const std::string& name) const;

    // 2-D view of a tensor; higher-rank tensors are folded as rows × last dim.
    Eigen::MatrixXd matrix(const std::string& name) const;
    std::vector<int> ints(const std::string& name) const;

    const std::map<std::string, Entry>& entries() const { return entries_; }

    nlohmann::json& meta() { return meta_; }
    const nlohmann::json& meta() const { return meta_; }

    void save(const std::filesystem::path& dir) const;
    static TensorArchive load(const std::filesystem::path& dir);

private:
    std::map<std::string, Entry> entries_;
    nlohmann::json meta_ = nlohmann::json::object();
};

}  // namespace fet
