#include "poselatent/fta.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "poselatent/errors.hpp"

namespace poselatent {

namespace {

static_assert(std::endian::native == std::endian::little, "FTA I/O assumes a little-endian host");

constexpr char kMagic[4] = {'F', 'T', 'A', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("FTA archive truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  void copy(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Archive::add(ArchiveEntry e) {
  if (index_.count(e.name)) throw ArgumentError("duplicate archive entry '" + e.name + "'");
  index_[e.name] = entries_.size();
  entries_.push_back(std::move(e));
}

void Archive::put(std::string name, Shape shape, std::vector<float> values) {
  if (shape.size() > 255) throw DimensionError("archive tensor rank exceeds 255");
  if (shape_numel(shape) != values.size()) throw DimensionError("archive tensor '" + name + "' shape/data mismatch");
  ArchiveEntry e;
  e.name = std::move(name);
  e.dtype = DType::f32;
  e.shape = std::move(shape);
  e.values = std::move(values);
  add(std::move(e));
}

void Archive::put_json(std::string name, const nlohmann::json& doc) {
  const std::string text = doc.dump(2);
  ArchiveEntry e;
  e.name = std::move(name);
  e.dtype = DType::bytes;
  e.shape = {text.size()};
  e.raw.assign(text.begin(), text.end());
  add(std::move(e));
}

const ArchiveEntry& Archive::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw IoError("archive has no entry '" + name + "'");
  return entries_[it->second];
}

TensorF Archive::tensor(const std::string& name) const {
  const auto& e = at(name);
  if (e.dtype != DType::f32) throw IoError("archive entry '" + name + "' is not an f32 tensor");
  return TensorF::from(e.shape, e.values);
}

nlohmann::json Archive::json(const std::string& name) const {
  const auto& e = at(name);
  if (e.dtype != DType::bytes) throw IoError("archive entry '" + name + "' is not a JSON document");
  try {
    return nlohmann::json::parse(e.raw.begin(), e.raw.end());
  } catch (const nlohmann::json::parse_error& err) {
    throw IoError("archive entry '" + name + "' holds invalid JSON: " + err.what());
  }
}

std::vector<std::uint8_t> Archive::serialize() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    out.push_back(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    if (e.dtype == DType::f32) {
      const auto* p = reinterpret_cast<const std::uint8_t*>(e.values.data());
      out.insert(out.end(), p, p + e.values.size() * sizeof(float));
    } else {
      out.insert(out.end(), e.raw.begin(), e.raw.end());
    }
  }
  return out;
}

Archive Archive::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.copy(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("not an FTA1 archive (bad magic)");
  Archive a;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    ArchiveEntry e;
    e.name.resize(r.u32());
    r.copy(e.name.data(), e.name.size());
    const std::uint8_t dtype = r.u8();
    if (dtype > 1) throw IoError("archive entry '" + e.name + "' has unknown dtype " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const std::uint8_t rank = r.u8();
    for (std::uint8_t k = 0; k < rank; ++k) e.shape.push_back(r.u32());
    const std::size_t n = shape_numel(e.shape);
    if (e.dtype == DType::f32) {
      e.values.resize(n);
      r.copy(e.values.data(), n * sizeof(float));
    } else {
      e.raw.resize(n);
      r.copy(e.raw.data(), n);
    }
    a.add(std::move(e));
  }
  if (!r.done()) throw IoError("trailing bytes after FTA archive");
  return a;
}

void Archive::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace poselatent
