#include "cbsm/tensor_io.hpp"

#include "cbsm/error.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace cbsm {

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

namespace {

constexpr std::array<char, 4> kMagic{'C', 'B', 'T', 'C'};

std::uint8_t dtype_code(torch::ScalarType type)
{
    switch (type) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    case torch::kUInt8: return 3;
    default:
        throw DataError("tensor container: unsupported dtype " + std::string(c10::toString(type)));
    }
}

torch::ScalarType dtype_from_code(std::uint8_t code, const std::filesystem::path& path)
{
    switch (code) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    case 3: return torch::kUInt8;
    default:
        throw DataError(path.string() + ": unknown dtype code " + std::to_string(code));
    }
}

template <typename T>
void put(std::ostream& out, T value)
{
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path)
{
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw DataError(path.string() + ": truncated tensor container");
    }
    return value;
}

} // namespace

void write_tensors(const std::filesystem::path& path, const NamedTensors& tensors)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open " + path.string() + " for writing");
    }
    out.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(out, kContainerVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        const auto t = tensor.detach().to(torch::kCPU).contiguous();
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint8_t>(out, dtype_code(t.scalar_type()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
        for (const auto d : t.sizes()) {
            put<std::int64_t>(out, d);
        }
        const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
        put<std::uint64_t>(out, nbytes);
        out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    }
    if (!out) {
        throw DataError("write failed for " + path.string());
    }
}

NamedTensors read_tensors(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("missing file " + path.string());
    }
    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) {
        throw DataError(path.string() + ": not a tensor container (bad magic)");
    }
    const auto version = get<std::uint32_t>(in, path);
    if (version != kContainerVersion) {
        throw DataError(path.string() + ": unsupported container version " + std::to_string(version));
    }
    const auto count = get<std::uint32_t>(in, path);
    NamedTensors result;
    result.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = get<std::uint32_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto dtype = dtype_from_code(get<std::uint8_t>(in, path), path);
        const auto ndim = get<std::uint32_t>(in, path);
        std::vector<std::int64_t> dims(ndim);
        for (auto& d : dims) {
            d = get<std::int64_t>(in, path);
        }
        const auto nbytes = get<std::uint64_t>(in, path);
        auto tensor = torch::empty(dims, torch::TensorOptions().dtype(dtype));
        if (static_cast<std::uint64_t>(tensor.numel() * tensor.element_size()) != nbytes) {
            throw DataError(path.string() + ": size mismatch in entry '" + name + "'");
        }
        in.read(static_cast<char*>(tensor.data_ptr()), static_cast<std::streamsize>(nbytes));
        if (!in) {
            throw DataError(path.string() + ": truncated entry '" + name + "'");
        }
        result.emplace_back(std::move(name), std::move(tensor));
    }
    return result;
}

const torch::Tensor& find_tensor(const NamedTensors& tensors, std::string_view name)
{
    for (const auto& [key, value] : tensors) {
        if (key == name) {
            return value;
        }
    }
    throw DataError("tensor container has no entry '" + std::string(name) + "'");
}

NamedTensors module_state(const torch::nn::Module& module)
{
    NamedTensors state;
    for (const auto& item : module.named_parameters(/*recurse=*/true)) {
        state.emplace_back(item.key(), item.value());
    }
    for (const auto& item : module.named_buffers(/*recurse=*/true)) {
        state.emplace_back(item.key(), item.value());
    }
    return state;
}

void save_module(const torch::nn::Module& module, const std::filesystem::path& path)
{
    write_tensors(path, module_state(module));
}

void load_module(torch::nn::Module& module, const std::filesystem::path& path)
{
    const auto stored = read_tensors(path);
    torch::NoGradGuard no_grad;
    for (auto& [name, target] : module_state(module)) {
        const auto& source = find_tensor(stored, name);
        if (!source.sizes().equals(target.sizes())) {
            throw DataError(path.string() + ": shape mismatch for '" + name + "'");
        }
        target.copy_(source.to(target.scalar_type()));
    }
}

std::string sha256_hex(std::string_view bytes)
{
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int length = 0;
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest.data(), &length) != 1) {
        throw Error("sha256 computation failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string hex;
    hex.reserve(2 * length);
    for (unsigned int i = 0; i < length; ++i) {
        hex.push_back(kHex[digest[i] >> 4]);
        hex.push_back(kHex[digest[i] & 0xf]);
    }
    return hex;
}

std::string sha256_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("missing file " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return sha256_hex(buffer.str());
}

} // namespace cbsm
