#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ddspme/error.hpp"

namespace ddspme {

// Collected schema or invariant violations; validation reports all of them.
struct Violations {
  std::vector<std::string> items;
  void add(std::string msg) { items.push_back(std::move(msg)); }
  bool empty() const { return items.empty(); }
  void throw_if_any(const std::string& what) const {
    if (items.empty()) return;
    std::string msg = what + ":";
    for (const auto& s : items) msg += "\n  " + s;
    throw InvalidArgument(msg);
  }
};

// Reads keys from one JSON object, records type errors, and flags keys that
// were never read as unknown once finish() is called.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path, Violations& v)
      : j_(j), path_(std::move(path)), v_(v) {
    if (!j_.is_object()) {
      v_.add(path_ + ": expected an object");
      ok_ = false;
    }
  }

  bool has(const std::string& key) const { return ok_ && j_.contains(key); }

  const nlohmann::json* raw(const std::string& key) {
    seen_.insert(key);
    if (!has(key)) return nullptr;
    return &j_.at(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    const nlohmann::json* node = raw(key);
    if (!node) return fallback;
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!node->is_number()) throw std::runtime_error("not a number");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!node->is_number_integer()) throw std::runtime_error("not an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (node->get<long long>() < 0) throw std::runtime_error("must be nonnegative");
        }
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!node->is_boolean()) throw std::runtime_error("not a boolean");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!node->is_string()) throw std::runtime_error("not a string");
      }
      return node->get<T>();
    } catch (const std::exception& e) {
      v_.add(path_ + "." + key + ": " + e.what());
      return fallback;
    }
  }

  template <typename T>
  T required(const std::string& key, T fallback) {
    if (!has(key)) {
      seen_.insert(key);
      v_.add(path_ + "." + key + ": required key missing");
      return fallback;
    }
    return get<T>(key, fallback);
  }

  void finish() {
    if (!ok_) return;
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) v_.add(path_ + "." + item.key() + ": unknown key");
    }
  }

  const std::string& path() const { return path_; }
  Violations& violations() { return v_; }

 private:
  const nlohmann::json& j_;
  std::string path_;
  Violations& v_;
  std::set<std::string> seen_;
  bool ok_ = true;
};

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : data) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace ddspme
