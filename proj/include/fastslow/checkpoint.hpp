#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fastslow/tensor.hpp"

namespace fastslow {

// Ordered name -> tensor map used for checkpoints and optimizer alignment.
// Order is the insertion order and is part of the on-disk format.
class ParamStore {
  public:
    void add(const std::string& name, Tensor t);
    bool has(const std::string& name) const { return pos_.count(name) > 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    size_t size() const { return items_.size(); }
    int64_t total_elements() const;
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

  private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, size_t> pos_;
};

// Binary container: little-endian, magic "FSCKPT1", entry count, then
// (name, shape, float64 payload) triples, then a 64-bit checksum of all
// payload bytes in file order. Writes are atomic; loads validate magic,
// bounds, checksum, and value finiteness.
void save_checkpoint(const ParamStore& store, const std::string& path);
ParamStore load_checkpoint(const std::string& path);

}  // namespace fastslow
