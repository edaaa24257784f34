#include "dslstm/archive.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dslstm/error.hpp"

namespace dslstm::io {

namespace {

constexpr std::array<char, 4> kArchiveMagic{'D', 'S', 'L', '1'};
constexpr std::array<char, 4> kCheckpointMagic{'D', 'S', 'L', 'P'};
constexpr std::uint32_t kMaxRank = 8;

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void get_bytes(std::istream& in, char* dst, std::size_t n, const std::string& context) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw ValidationError("truncated file while reading " + context);
}

std::uint32_t get_u32(std::istream& in, const std::string& context) {
  std::array<unsigned char, 4> b{};
  get_bytes(in, reinterpret_cast<char*>(b.data()), 4, context);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint8_t get_u8(std::istream& in, const std::string& context) {
  char c = 0;
  get_bytes(in, &c, 1, context);
  return static_cast<std::uint8_t>(c);
}

std::string get_string(std::istream& in, const std::string& context, std::uint32_t limit = 1u << 20) {
  const std::uint32_t n = get_u32(in, context);
  if (n > limit) throw ValidationError("implausible string length " + std::to_string(n) + " in " + context);
  std::string s(n, '\0');
  get_bytes(in, s.data(), n, context);
  return s;
}

void check_magic(std::istream& in, const std::array<char, 4>& magic, const std::filesystem::path& path) {
  std::array<char, 4> got{};
  in.read(got.data(), 4);
  if (in.gcount() != 4 || got != magic) {
    throw ValidationError(path.string() + ": bad magic (expected \"" + std::string(magic.data(), 4) + "\")");
  }
}

void check_version(std::istream& in, std::uint32_t expected, const std::filesystem::path& path) {
  const std::uint32_t v = get_u32(in, "version");
  if (v != expected) {
    throw ValidationError(path.string() + ": unsupported version " + std::to_string(v) + " (expected " +
                          std::to_string(expected) + ")");
  }
}

void check_eof(std::istream& in, const std::filesystem::path& path) {
  if (in.peek() != std::char_traits<char>::eof()) throw ValidationError(path.string() + ": trailing bytes");
}

std::ifstream open_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return in;
}

// Written under a temporary name, then renamed into place.
void commit(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string() + ": " + ec.message());
}

std::string encode_meta(const std::map<std::string, std::string>& meta) {
  std::string s;
  for (const auto& [k, v] : meta) s += k + "=" + v + "\n";
  return s;
}

std::map<std::string, std::string> decode_meta(const std::string& text) {
  std::map<std::string, std::string> meta;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("checkpoint metadata: malformed line '" + line + "'");
    meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return meta;
}

}  // namespace

void write_tensor(std::ostream& out, const ad::Tensor<float>& t) {
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (const auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (const float v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

ad::Tensor<float> read_tensor(std::istream& in, const std::string& context) {
  const std::uint32_t rank = get_u32(in, context);
  if (rank > kMaxRank) throw ValidationError("implausible tensor rank " + std::to_string(rank) + " in " + context);
  ad::Shape shape(rank);
  std::uint64_t total = 1;
  for (auto& d : shape) {
    d = get_u32(in, context);
    total *= d;
    if (total > (1ull << 32)) throw ValidationError("implausible tensor size in " + context);
  }
  std::vector<float> data(static_cast<std::size_t>(total));
  std::vector<char> raw(data.size() * 4);
  get_bytes(in, raw.data(), raw.size(), context);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto* b = reinterpret_cast<const unsigned char*>(raw.data() + 4 * i);
    const std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                            (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    data[i] = std::bit_cast<float>(u);
  }
  return ad::Tensor<float>(std::move(shape), std::move(data));
}

void write_features(const std::filesystem::path& path, const std::vector<dsp::FeatureRecord>& records) {
  std::ostringstream out(std::ios::binary);
  out.write(kArchiveMagic.data(), 4);
  put_u32(out, kArchiveVersion);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put_string(out, r.id);
    put_u8(out, static_cast<std::uint8_t>(r.label));
    write_tensor(out, r.mfcc);
    write_tensor(out, r.s1);
    write_tensor(out, r.s2);
  }
  commit(path, out.str());
}

std::vector<dsp::FeatureRecord> read_features(const std::filesystem::path& path) {
  auto in = open_read(path);
  check_magic(in, kArchiveMagic, path);
  check_version(in, kArchiveVersion, path);
  const std::uint32_t count = get_u32(in, "record count");
  std::vector<dsp::FeatureRecord> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string ctx = "record " + std::to_string(i) + " of " + path.string();
    dsp::FeatureRecord r;
    r.id = get_string(in, ctx);
    const std::uint8_t label = get_u8(in, ctx);
    if (label >= kNumClasses) throw ValidationError("bad label " + std::to_string(label) + " in " + ctx);
    r.label = static_cast<Emotion>(label);
    r.mfcc = read_tensor(in, ctx + " (mfcc)");
    r.s1 = read_tensor(in, ctx + " (s1)");
    r.s2 = read_tensor(in, ctx + " (s2)");
    records.push_back(std::move(r));
  }
  check_eof(in, path);
  return records;
}

std::size_t Checkpoint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

Checkpoint make_checkpoint(model::Model<float>& m, std::map<std::string, std::string> meta) {
  Checkpoint c;
  c.config = m.config();
  c.meta = std::move(meta);
  for (const auto* p : m.parameters()) c.params.push_back({p->name, p->value});
  c.buffers = m.export_buffers();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream out(std::ios::binary);
  out.write(kCheckpointMagic.data(), 4);
  put_u32(out, kCheckpointVersion);
  put_string(out, ckpt.config.to_record());
  put_string(out, encode_meta(ckpt.meta));
  put_u32(out, static_cast<std::uint32_t>(ckpt.params.size() + ckpt.buffers.size()));
  for (const auto& p : ckpt.params) {
    put_string(out, p.name);
    put_u8(out, 0);
    write_tensor(out, p.value);
  }
  for (const auto& b : ckpt.buffers) {
    put_string(out, b.name);
    put_u8(out, 1);
    write_tensor(out, b.value);
  }
  commit(path, out.str());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  auto in = open_read(path);
  check_magic(in, kCheckpointMagic, path);
  check_version(in, kCheckpointVersion, path);
  Checkpoint c;
  c.config = model::ModelConfig::from_record(get_string(in, "config record"));
  c.meta = decode_meta(get_string(in, "metadata record"));
  const std::uint32_t count = get_u32(in, "entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string ctx = "checkpoint entry " + std::to_string(i);
    std::string name = get_string(in, ctx);
    const std::uint8_t kind = get_u8(in, ctx);
    auto value = read_tensor(in, ctx + " (" + name + ")");
    if (kind == 0) {
      c.params.push_back({std::move(name), std::move(value)});
    } else if (kind == 1) {
      c.buffers.push_back({std::move(name), std::move(value)});
    } else {
      throw ValidationError("bad entry kind in " + ctx);
    }
  }
  check_eof(in, path);
  return c;
}

void apply_checkpoint(model::Model<float>& m, const Checkpoint& ckpt) {
  std::map<std::string, const ad::Tensor<float>*> params;
  for (const auto& p : ckpt.params) params[p.name] = &p.value;
  const auto targets = m.parameters();
  if (targets.size() != params.size()) {
    throw ValidationError("checkpoint has " + std::to_string(params.size()) + " parameters, model expects " +
                          std::to_string(targets.size()));
  }
  for (auto* p : targets) {
    const auto it = params.find(p->name);
    if (it == params.end()) throw ValidationError("checkpoint is missing parameter " + p->name);
    if (it->second->shape() != p->value.shape()) {
      throw ShapeError("checkpoint parameter " + p->name + " has shape " + ad::shape_str(it->second->shape()) +
                       ", model expects " + ad::shape_str(p->value.shape()));
    }
    p->value = *it->second;
  }
  std::map<std::string, ad::Tensor<float>> buffers;
  for (const auto& b : ckpt.buffers) buffers[b.name] = b.value;
  m.import_buffers(buffers);
}

}  // namespace dslstm::io
