#include "bevfuse/serialize.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "bevfuse/error.hpp"

namespace bevfuse {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

template <class T>
void put(std::ostream& os, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <class T>
T get(std::istream& is) {
  char buf[sizeof(T)];
  if (!is.read(buf, sizeof(T))) throw ContractError("unexpected end of binary stream");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

void expect_magic(std::istream& is, const char* magic) {
  char buf[4];
  if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
    throw ContractError(std::string("bad magic, expected ") + magic);
  }
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
void write_f64(std::ostream& os, double v) { put(os, v); }
std::uint32_t read_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get<std::uint64_t>(is); }
double read_f64(std::istream& is) { return get<double>(is); }

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("BFT1", 4);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) write_u64(os, d);
  const auto v = t.values();
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& is) {
  expect_magic(is, "BFT1");
  const auto rank = read_u32(is);
  if (rank == 0 || rank > 8) throw ContractError("BFT1 rank " + std::to_string(rank) + " out of range");
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& d : shape) {
    d = read_u64(is);
    if (d == 0 || d > (1ULL << 32)) throw ContractError("BFT1 dimension out of range");
    n *= d;
    if (n > (1ULL << 32)) throw ContractError("BFT1 tensor too large");
  }
  std::vector<double> v(n);
  if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
    throw ContractError("BFT1 payload truncated");
  }
  return Tensor::from(std::move(shape), std::move(v));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ostringstream os;
  write_tensor(os, t);
  write_file(path, os.str());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::istringstream is(read_file(path));
  return read_tensor(is);
}

std::string checkpoint_bytes(const ParameterStore& store) {
  std::ostringstream os;
  os.write("BFCK", 4);
  write_u32(os, static_cast<std::uint32_t>(store.all().size()));
  for (const auto& p : store.all()) {
    write_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_tensor(os, p.tensor);
  }
  return os.str();
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store) {
  write_file(path, checkpoint_bytes(store));
}

void load_checkpoint(const std::filesystem::path& path, ParameterStore& store) {
  std::istringstream is(read_file(path));
  expect_magic(is, "BFCK");
  const auto count = read_u32(is);
  if (count != store.all().size()) {
    throw ContractError("checkpoint " + path.string() + " has " + std::to_string(count) + " parameters, model has " +
                        std::to_string(store.all().size()));
  }
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto len = read_u32(is);
    if (len > 4096) throw ContractError("checkpoint name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ContractError("checkpoint truncated");
    Tensor t = read_tensor(is);
    if (!store.contains(name)) throw ContractError("checkpoint parameter '" + name + "' unknown to the model");
    Tensor dst = store.get(name);
    if (dst.shape() != t.shape()) {
      throw ContractError("checkpoint parameter '" + name + "' has shape " + shape_str(t.shape()) + ", model has " +
                          shape_str(dst.shape()));
    }
    auto out = dst.mutable_values();
    auto in = t.values();
    std::copy(in.begin(), in.end(), out.begin());
  }
}

std::string git_blob_sha1(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace bevfuse
