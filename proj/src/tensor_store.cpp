#include "cart/tensor_store.hpp"

#include <bit>
#include <cstring>
#include <fnmatch.h>
#include <fstream>
#include <set>

#include <json.hpp>

#include "cart/error.hpp"

namespace cart {

static_assert(std::endian::native == std::endian::little, "container encoding assumes a little-endian host");

namespace {

constexpr std::string_view kMetadataKey = "__metadata__";

std::size_t checked_numel(const std::vector<std::int64_t> &shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw Error(ErrorCode::Format, "tensor dims must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

DType parse_dtype(const std::string &s) {
    if (s == "F32") return DType::F32;
    if (s == "F64") return DType::F64;
    throw Error(ErrorCode::UnsupportedDtype, "dtype '" + s + "' is not F32 or F64");
}

bool matches_any(const std::vector<std::string> &patterns, const std::string &name) {
    for (const auto &p : patterns)
        if (::fnmatch(p.c_str(), name.c_str(), 0) == 0) return true;
    return false;
}

} // namespace

std::string dtype_name(DType dtype) { return dtype == DType::F32 ? "F32" : "F64"; }

std::size_t dtype_size(DType dtype) { return dtype == DType::F32 ? 4 : 8; }

DenseTensor::DenseTensor(std::vector<std::int64_t> shape_, DType dtype_, std::vector<double> values_)
    : shape(std::move(shape_)), dtype(dtype_), values(std::move(values_)) {
    validate();
}

std::int64_t DenseTensor::numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::int64_t DenseTensor::rows() const { return shape.empty() ? 0 : shape[0]; }

std::int64_t DenseTensor::cols() const { return shape.size() < 2 ? 1 : shape[1]; }

void DenseTensor::validate() const {
    if (shape.empty()) throw Error(ErrorCode::Format, "tensor must have at least one dimension");
    if (checked_numel(shape) != values.size())
        throw Error(ErrorCode::Format, "element count does not match shape");
}

Eigen::MatrixXd to_matrix(const DenseTensor &t) {
    if (!t.is_2d()) throw Error(ErrorCode::Shape, "to_matrix needs a 2-D tensor");
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    return Eigen::Map<const RowMajor>(t.values.data(), t.rows(), t.cols());
}

DenseTensor from_matrix(const Eigen::MatrixXd &m, DType dtype) {
    DenseTensor t;
    t.shape = {m.rows(), m.cols()};
    t.dtype = dtype;
    t.values.resize(static_cast<std::size_t>(m.size()));
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<RowMajor>(t.values.data(), m.rows(), m.cols()) = m;
    return t;
}

ParamClass classify(const std::string &, const DenseTensor &tensor) {
    if (tensor.shape.size() == 2 && tensor.shape[0] >= 2 && tensor.shape[1] >= 2) return ParamClass::Matrix;
    return ParamClass::NonMatrix;
}

ParamClass classify(const std::string &name, const DenseTensor &tensor, const ClassOverrides &overrides) {
    if (matches_any(overrides.matrix_exclude, name)) return ParamClass::NonMatrix;
    if (tensor.is_2d() && matches_any(overrides.matrix_include, name)) return ParamClass::Matrix;
    return classify(name, tensor);
}

std::vector<std::string> matrix_names(const TensorMap &map, const ClassOverrides &overrides) {
    std::vector<std::string> names;
    for (const auto &[name, t] : map.entries)
        if (classify(name, t, overrides) == ParamClass::Matrix) names.push_back(name);
    return names;
}

std::vector<std::uint8_t> encode_checkpoint(const TensorMap &map) {
    nlohmann::json header = nlohmann::json::object();
    std::size_t offset = 0;
    for (const auto &[name, t] : map.entries) {
        t.validate();
        const std::size_t nbytes = t.values.size() * dtype_size(t.dtype);
        header[name] = {{"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"data_offsets", {offset, offset + nbytes}}};
        offset += nbytes;
    }
    if (!map.metadata.empty()) header[std::string(kMetadataKey)] = map.metadata;

    std::string text = header.dump();
    // Pad with spaces so the data section starts 8-byte aligned.
    while ((text.size() + 8) % 8 != 0) text.push_back(' ');

    std::vector<std::uint8_t> out(8 + text.size() + offset);
    const std::uint64_t header_len = text.size();
    std::memcpy(out.data(), &header_len, 8);
    std::memcpy(out.data() + 8, text.data(), text.size());

    std::uint8_t *cursor = out.data() + 8 + text.size();
    for (const auto &[name, t] : map.entries) {
        if (t.dtype == DType::F64) {
            std::memcpy(cursor, t.values.data(), t.values.size() * 8);
            cursor += t.values.size() * 8;
        } else {
            for (double v : t.values) {
                const float f = static_cast<float>(v);
                std::memcpy(cursor, &f, 4);
                cursor += 4;
            }
        }
    }
    return out;
}

TensorMap decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw Error(ErrorCode::Truncation, "file shorter than the 8-byte header length");
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    if (header_len > bytes.size() - 8)
        throw Error(ErrorCode::Truncation, "declared header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorCode::Format, std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) throw Error(ErrorCode::Format, "header must be a JSON object");

    const auto data = bytes.subspan(8 + header_len);
    TensorMap map;
    for (const auto &[name, entry] : header.items()) {
        if (name == kMetadataKey) {
            if (!entry.is_object()) throw Error(ErrorCode::Format, "__metadata__ must be a string map");
            for (const auto &[k, v] : entry.items()) {
                if (!v.is_string()) throw Error(ErrorCode::Format, "__metadata__ values must be strings");
                map.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            throw Error(ErrorCode::Format, "tensor '" + name + "' lacks dtype/shape/data_offsets");

        DenseTensor t;
        std::size_t begin = 0, end = 0;
        try {
            t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
            t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
            const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
            if (offsets.size() != 2) throw Error(ErrorCode::Format, "data_offsets must have two entries");
            begin = offsets[0];
            end = offsets[1];
        } catch (const nlohmann::json::exception &e) {
            throw Error(ErrorCode::Format, "tensor '" + name + "': " + e.what());
        }
        if (t.shape.empty()) throw Error(ErrorCode::Format, "tensor '" + name + "' has no dimensions");
        const std::size_t n = checked_numel(t.shape);
        if (end < begin) throw Error(ErrorCode::Format, "tensor '" + name + "' has reversed offsets");
        if (end > data.size())
            throw Error(ErrorCode::Truncation, "tensor '" + name + "' extends past end of file");
        if (end - begin != n * dtype_size(t.dtype))
            throw Error(ErrorCode::Format, "tensor '" + name + "' byte length does not match its shape");

        t.values.resize(n);
        const std::uint8_t *src = data.data() + begin;
        if (t.dtype == DType::F64) {
            std::memcpy(t.values.data(), src, n * 8);
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, src + 4 * i, 4);
                t.values[i] = f;
            }
        }
        map.entries.emplace(name, std::move(t));
    }
    return map;
}

TensorMap load_checkpoint(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

void save_checkpoint(const TensorMap &map, const std::filesystem::path &path) {
    const auto bytes = encode_checkpoint(map);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

void validate_aligned(std::span<const TensorMap> maps) {
    if (maps.size() < 2) throw Error(ErrorCode::Precondition, "validate_aligned needs at least two checkpoints");

    std::set<std::string> names;
    for (const auto &m : maps)
        for (const auto &[name, _] : m.entries) names.insert(name);

    for (const auto &name : names) {
        const DenseTensor *first = nullptr;
        for (const auto &m : maps) {
            auto it = m.entries.find(name);
            if (it == m.entries.end())
                throw Error(ErrorCode::ArchitectureMismatch, name + " (missing in one checkpoint)");
            if (!first) {
                first = &it->second;
            } else if (it->second.shape != first->shape) {
                throw Error(ErrorCode::ArchitectureMismatch, name + " (shape differs)");
            } else if (it->second.dtype != first->dtype) {
                throw Error(ErrorCode::ArchitectureMismatch, name + " (dtype differs)");
            }
        }
    }
}

} // namespace cart
