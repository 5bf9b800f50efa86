#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cart {

enum class DType { F32, F64 };

std::string dtype_name(DType dtype); // "F32" / "F64", as written in the container header
std::size_t dtype_size(DType dtype);

/// Dense row-major tensor. Values are held in float64 regardless of the stored
/// dtype; the dtype tag decides the on-disk encoding.
struct DenseTensor {
    std::vector<std::int64_t> shape;
    DType dtype = DType::F64;
    std::vector<double> values;

    DenseTensor() = default;
    DenseTensor(std::vector<std::int64_t> shape, DType dtype, std::vector<double> values);

    std::int64_t numel() const;
    bool is_2d() const { return shape.size() == 2; }
    std::int64_t rows() const;
    std::int64_t cols() const;

    /// Throws Error(Format) if the shape/buffer invariants do not hold.
    void validate() const;

    bool operator==(const DenseTensor &) const = default;
};

/// Copies a 2-D tensor into a column-major Eigen matrix.
Eigen::MatrixXd to_matrix(const DenseTensor &t);
DenseTensor from_matrix(const Eigen::MatrixXd &m, DType dtype = DType::F64);

/// Named collection of tensors forming one checkpoint. std::map keeps the
/// lexicographic iteration order the container format relies on.
struct TensorMap {
    std::map<std::string, DenseTensor> entries;
    std::map<std::string, std::string> metadata;

    bool operator==(const TensorMap &) const = default;
};

enum class ParamClass { Matrix, NonMatrix };

/// Glob patterns (fnmatch syntax) that force a tensor into one class.
/// Exclusions win over inclusions. Only 2-D tensors may be forced to Matrix.
struct ClassOverrides {
    std::vector<std::string> matrix_include;
    std::vector<std::string> matrix_exclude;
};

/// Matrix iff exactly two dims, both >= 2. Depends on shape only.
ParamClass classify(const std::string &name, const DenseTensor &tensor);
ParamClass classify(const std::string &name, const DenseTensor &tensor, const ClassOverrides &overrides);

/// Names of all Matrix-class tensors in lexicographic order.
std::vector<std::string> matrix_names(const TensorMap &map, const ClassOverrides &overrides = {});

TensorMap load_checkpoint(const std::filesystem::path &path);
void save_checkpoint(const TensorMap &map, const std::filesystem::path &path);

/// In-memory encode/decode of the container; the file functions wrap these.
std::vector<std::uint8_t> encode_checkpoint(const TensorMap &map);
TensorMap decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Succeeds iff every map has the same names, shapes and dtypes.
/// Needs at least two maps (Error(Precondition) otherwise); a mismatch throws
/// Error(ArchitectureMismatch) naming the lexicographically first offending tensor.
void validate_aligned(std::span<const TensorMap> maps);

} // namespace cart
