// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "xasr/error.hpp"
#include "xasr/tensor.hpp"

namespace xasr {

/// Transfer role of a parameter. Parameters tagged Embedding or Softmax are
/// vocabulary-dependent and get replaced when transferring across
/// vocabularies; everything else copies verbatim.
enum class ParamRole : std::uint8_t {
  Encoder = 0,
  DecoderCore = 1,
  Embedding = 2,
  Softmax = 3,
};

inline const char* to_string(ParamRole r) {
  switch (r) {
    case ParamRole::Encoder: return "encoder";
    case ParamRole::DecoderCore: return "decoder-core";
    case ParamRole::Embedding: return "embedding";
    case ParamRole::Softmax: return "softmax";
  }
  return "?";
}

/// Named, role-tagged model parameters. std::map keeps iteration order
/// deterministic, which matters for reproducible initialization and
/// checkpoint layout.
template <typename T>
class ParameterSetT {
 public:
  struct Entry {
    TensorT<T> tensor;
    ParamRole role;
  };

  void add(const std::string& name, TensorT<T> tensor, ParamRole role) {
    auto [it, inserted] = entries_.emplace(name, Entry{std::move(tensor), role});
    if (!inserted) throw UsageError("duplicate parameter name: " + name);
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const TensorT<T>& tensor(const std::string& name) const { return entry(name).tensor; }
  TensorT<T>& tensor(const std::string& name) { return entry(name).tensor; }
  ParamRole role(const std::string& name) const { return entry(name).role; }

  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  template <typename U>
  ParameterSetT<U> cast() const {
    ParameterSetT<U> out;
    for (const auto& [name, e] : entries_) {
      out.add(name, e.tensor.template cast<U>(), e.role);
    }
    return out;
  }

 private:
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

using ParameterSet = ParameterSetT<float>;

}  // namespace xasr
