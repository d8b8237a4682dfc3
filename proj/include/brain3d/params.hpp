#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "brain3d/autograd.hpp"
#include "brain3d/errors.hpp"

namespace brain3d {

/// Named tensors partitioned into groups ("encoder.patch3d", "lm.blocks", ...).
/// Insertion order is preserved and defines the serialised layout of a group.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::string group;
    Matrix<T> value;
  };

  void add(std::string name, std::string group, Matrix<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(group), std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Matrix<T>& get(const std::string& name) { return entries_[lookup(name)].value; }
  const Matrix<T>& get(const std::string& name) const { return entries_[lookup(name)].value; }
  const std::string& group_of(const std::string& name) const { return entries_[lookup(name)].group; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<std::string> groups() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      if (std::find(out.begin(), out.end(), e.group) == out.end()) out.push_back(e.group);
    }
    return out;
  }

  bool has_group(const std::string& group) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.group == group; });
  }

  void remove_group(const std::string& group) {
    std::vector<Entry> kept;
    for (auto& e : entries_) {
      if (e.group != group) kept.push_back(std::move(e));
    }
    entries_ = std::move(kept);
    reindex();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.group, e.value.template cast<U>());
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("missing parameter: " + name);
    return it->second;
  }

  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].name, i);
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Predicate deciding whether a parameter group receives gradients.
using GroupFilter = std::function<bool(const std::string& group)>;

inline GroupFilter no_groups() {
  return [](const std::string&) { return false; };
}

/// Lazily exposes store parameters as tape leaves; leaves of trainable
/// groups require gradients.
template <typename T>
class Binder {
 public:
  Binder(ag::Tape<T>& tape, const ParamStore<T>& store, GroupFilter trainable = no_groups())
      : tape_(tape), store_(store), trainable_(std::move(trainable)) {}

  ag::Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const bool train = trainable_(store_.group_of(name));
    ag::Var v = tape_.leaf(store_.get(name), train);
    bound_.emplace(name, v);
    return v;
  }

  bool contains(const std::string& name) const { return store_.contains(name); }
  ag::Tape<T>& tape() { return tape_; }
  const ParamStore<T>& store() const { return store_; }

  /// Adds d(output)/d(param) for every bound trainable parameter into `grads`.
  void accumulate(std::map<std::string, Matrix<T>>& grads) const {
    for (const auto& [name, var] : bound_) {
      if (!tape_.requires_grad(var)) continue;
      auto g = tape_.grad(var);
      auto it = grads.find(name);
      if (it == grads.end()) {
        grads.emplace(name, std::move(g));
      } else {
        it->second += g;
      }
    }
  }

 private:
  ag::Tape<T>& tape_;
  const ParamStore<T>& store_;
  GroupFilter trainable_;
  std::map<std::string, ag::Var> bound_;
};

template <typename T>
Matrix<T> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

}  // namespace brain3d
