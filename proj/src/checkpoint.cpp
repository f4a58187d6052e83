#include "pseg/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace pseg {

namespace {

constexpr char kMagic[4] = {'P', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xff);
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back((v >> (8 * i)) & 0xff);
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
  const std::vector<std::uint8_t>& b;
  std::size_t pos = 0;
  const std::string& origin;

  void need(std::size_t n) const {
    if (pos + n > b.size())
      throw ParseError(cat(origin, ": truncated at byte offset ", pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    std::uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s(b.begin() + pos, b.begin() + pos + n);
    pos += n;
    return s;
  }
};

void put_float_block(std::vector<std::uint8_t>& out,
                     const std::vector<float>& v) {
  put_u64(out, v.size());
  for (float f : v) put_f32(out, f);
}

std::vector<float> read_float_block(Reader& r) {
  std::uint64_t n = r.u64();
  std::vector<float> v(n);
  for (auto& f : v) f = r.f32();
  return v;
}

}  // namespace

std::uint32_t crc32_bytes(const std::uint8_t* data, std::size_t len,
                          std::uint32_t seed) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = seed ^ 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i)
    crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

Checkpoint Checkpoint::from_params(
    const std::vector<NamedParam<float>>& params,
    const std::string& config_echo) {
  Checkpoint ck;
  ck.config_echo = config_echo;
  for (const auto& p : params)
    ck.tensors.push_back({p.name, p.tensor.shape(), p.tensor.value()});
  return ck;
}

void Checkpoint::apply_to(std::vector<NamedParam<float>>& params) const {
  for (auto& p : params) {
    const CheckpointEntry* e = find(p.name);
    if (!e)
      throw ConfigError(cat("checkpoint is missing tensor '", p.name, "'"));
    if (e->shape != p.tensor.shape())
      throw ConfigError(cat("checkpoint tensor '", p.name, "' has shape ",
                            shape_str(e->shape), " but the model expects ",
                            shape_str(p.tensor.shape())));
    p.tensor.value() = e->data;
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::vector<std::uint8_t> body;
  put_u32(body, kVersion);
  put_str(body, ckpt.config_echo);
  put_u32(body, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put_str(body, t.name);
    put_u32(body, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_u64(body, d);
    put_float_block(body, t.data);
  }
  body.push_back(ckpt.opt_state ? 1 : 0);
  if (ckpt.opt_state) {
    put_u64(body, static_cast<std::uint64_t>(ckpt.opt_state->step));
    put_u32(body,
            static_cast<std::uint32_t>(ckpt.opt_state->first_moments.size()));
    for (const auto& m : ckpt.opt_state->first_moments)
      put_float_block(body, m);
    for (const auto& v : ckpt.opt_state->second_moments)
      put_float_block(body, v);
  }

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.insert(out.end(), body.begin(), body.end());
  put_u32(out, crc32_bytes(body.data(), body.size()));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError(cat("cannot write checkpoint '", path, "'"));
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw InputError(cat("short write to '", path, "'"));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError(cat("cannot open checkpoint '", path, "'"));
  std::vector<std::uint8_t> bytes(std::istreambuf_iterator<char>(f),
                                  std::istreambuf_iterator<char>{});
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw ParseError(cat(path, ": not a checkpoint file"));

  const std::size_t body_len = bytes.size() - 8;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= std::uint32_t(bytes[bytes.size() - 4 + i]) << (8 * i);
  if (crc32_bytes(bytes.data() + 4, body_len) != stored_crc)
    throw ParseError(cat(path, ": checksum mismatch, file is corrupt"));

  std::vector<std::uint8_t> body(bytes.begin() + 4, bytes.end() - 4);
  Reader r{body, 0, path};
  std::uint32_t version = r.u32();
  if (version != kVersion)
    throw ParseError(cat(path, ": unsupported checkpoint version ", version));
  Checkpoint ck;
  ck.config_echo = r.str();
  std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    CheckpointEntry e;
    e.name = r.str();
    std::uint32_t ndim = r.u32();
    for (std::uint32_t d = 0; d < ndim; ++d)
      e.shape.push_back(static_cast<std::size_t>(r.u64()));
    e.data = read_float_block(r);
    if (e.data.size() != shape_numel(e.shape))
      throw ParseError(cat(path, ": tensor '", e.name,
                           "' payload does not match its shape"));
    ck.tensors.push_back(std::move(e));
  }
  r.need(1);
  bool has_opt = body[r.pos++] != 0;
  if (has_opt) {
    OptStateBlob opt;
    opt.step = static_cast<std::int64_t>(r.u64());
    std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i)
      opt.first_moments.push_back(read_float_block(r));
    for (std::uint32_t i = 0; i < n; ++i)
      opt.second_moments.push_back(read_float_block(r));
    ck.opt_state = std::move(opt);
  }
  return ck;
}

}  // namespace pseg
