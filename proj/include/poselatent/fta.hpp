#pragma once

// "FTA v1" named-tensor archive.
//
//   magic "FTA1" | u32 count | count x entry
//   entry: u32 name_len | name (UTF-8) | u8 dtype | u8 rank | rank x u32 dim | payload
//
// All integers and payloads are little-endian. dtype 0 is f32; dtype 1 is
// raw bytes (rank 1), used to embed JSON metadata documents such as
// "meta.json" next to the tensors they describe.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "poselatent/tensor.hpp"

namespace poselatent {

enum class DType : std::uint8_t { f32 = 0, bytes = 1 };

struct ArchiveEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<float> values;      // dtype f32
  std::vector<std::uint8_t> raw;  // dtype bytes
};

// Insertion-ordered collection of entries; names are unique.
class Archive {
 public:
  void put(std::string name, Shape shape, std::vector<float> values);
  template <typename T>
  void put(std::string name, const Tensor<T>& t) {
    put(std::move(name), t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
  }
  void put_json(std::string name, const nlohmann::json& doc);

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const ArchiveEntry& at(const std::string& name) const;
  TensorF tensor(const std::string& name) const;
  nlohmann::json json(const std::string& name) const;
  const std::vector<ArchiveEntry>& entries() const { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  static Archive deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  void add(ArchiveEntry e);
  std::vector<ArchiveEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace poselatent
