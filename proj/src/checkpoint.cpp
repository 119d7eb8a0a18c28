#include "icf/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace icf {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'I', 'C', 'F', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_f32(std::string& out, float v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t checked_u32(std::size_t v) {
  if (v > 0xFFFFFFFFull) throw std::length_error("checkpoint field exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

void put_tensors(std::string& out, const TensorMap& tensors) {
  put_u32(out, checked_u32(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, checked_u32(name.size()));
    out += name;
    put_u32(out, checked_u32(t.rank()));
    for (auto d : t.shape()) put_u32(out, checked_u32(d));
    for (float v : t.data()) put_f32(out, v);
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    std::uint32_t v;
    std::memcpy(&v, take(4), 4);
    return v;
  }
  float f32() {
    float v;
    std::memcpy(&v, take(4), 4);
    return v;
  }
  std::string str(std::size_t n) { return std::string(take(n), n); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put_tensors(out, ckpt.tensors);
  put_u32(out, checked_u32(ckpt.config.size()));
  for (const auto& [k, v] : ckpt.config) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint config entry cannot contain '=' in the key or newlines: " + k);
    }
    const std::string line = k + "=" + v;
    put_u32(out, checked_u32(line.size()));
    out += line;
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) throw std::runtime_error("not an ICF1 checkpoint");
  Checkpoint ckpt;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) v = r.f32();
    ckpt.tensors.emplace(std::move(name), Tensor<float>::from(std::move(shape), std::move(values)));
  }
  const std::uint32_t lines = r.u32();
  for (std::uint32_t i = 0; i < lines; ++i) {
    std::string line = r.str(r.u32());
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("malformed checkpoint config line: " + line);
    ckpt.config[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!r.done()) throw std::runtime_error("trailing bytes after checkpoint config block");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

std::string fingerprint(const TensorMap& tensors) {
  std::string bytes;
  put_tensors(bytes, tensors);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

}  // namespace icf
