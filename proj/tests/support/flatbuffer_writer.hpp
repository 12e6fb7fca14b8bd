#pragma once

// Minimal FlatBuffers writer for test fixtures. Objects are laid out front
// to back (each child after the slot that references it) so every offset is
// a forward uoffset, which is all the format requires.

#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <variant>
#include <vector>

namespace fbw {

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct ScalarField {
  std::vector<std::uint8_t> bytes;  // little-endian value, size == alignment
};

class Table {
 public:
  template <typename T>
  Table& scalar(int id, T value) {
    ScalarField f;
    f.bytes.resize(sizeof(T));
    std::memcpy(f.bytes.data(), &value, sizeof(T));
    set(id, std::move(f));
    return *this;
  }
  Table& ref(int id, NodePtr node) {
    set(id, std::move(node));
    return *this;
  }

  struct Field {
    int id;
    std::variant<ScalarField, NodePtr> value;
  };
  const std::vector<Field>& fields() const { return fields_; }

 private:
  void set(int id, std::variant<ScalarField, NodePtr> v) {
    for (auto& f : fields_) {
      if (f.id == id) {
        f.value = std::move(v);
        return;
      }
    }
    fields_.push_back({id, std::move(v)});
  }
  std::vector<Field> fields_;
};

struct ScalarVector {
  std::vector<std::uint8_t> bytes;
  std::size_t element_size = 1;
};

struct RefVector {
  std::vector<NodePtr> items;
};

struct Node {
  std::variant<Table, std::string, ScalarVector, RefVector> value;
};

NodePtr table(Table t);
NodePtr string(std::string s);
NodePtr bytes(std::vector<std::uint8_t> data);
NodePtr refs(std::vector<NodePtr> items);

template <typename T>
NodePtr vector(const std::vector<T>& values) {
  ScalarVector v;
  v.element_size = sizeof(T);
  v.bytes.resize(values.size() * sizeof(T));
  if (!values.empty()) std::memcpy(v.bytes.data(), values.data(), v.bytes.size());
  return std::make_shared<const Node>(Node{std::move(v)});
}

/// Serializes `root` with a 4-byte file identifier after the root offset.
std::vector<std::uint8_t> finish(const Table& root, const char identifier[4]);

}  // namespace fbw
