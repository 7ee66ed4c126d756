#pragma once

// Checkpoint container: an ordered set of named records, each a typed array.
//
//   char[8] magic "SFDACKPT", u32 version (1), u32 record count, then per
//   record: u32 key length, key bytes, u8 type (0 f32, 1 f64, 2 i64,
//   3 utf-8 text), u64 element count, raw little-endian elements.
//
// Networks store their spec under "<role>.spec" and every tensor under
// "<role>.param.<name>" / "<role>.buffer.<name>".

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "sfda/core/digest.hpp"
#include "sfda/core/error.hpp"
#include "sfda/nn/optim.hpp"
#include "sfda/nn/stylecomp.hpp"
#include "sfda/nn/unet.hpp"

namespace sfda::nn {

class Archive {
 public:
  using Record = std::variant<std::vector<float>, std::vector<double>, std::vector<std::int64_t>, std::string>;

  void put(const std::string& key, Record r) { records_[key] = std::move(r); }
  bool has(const std::string& key) const { return records_.count(key) > 0; }

  template <typename V>
  const V& get(const std::string& key) const {
    const auto it = records_.find(key);
    if (it == records_.end()) throw ValidationError("checkpoint has no record '" + key + "'");
    const V* v = std::get_if<V>(&it->second);
    if (v == nullptr) throw ValidationError("checkpoint record '" + key + "' has an unexpected type");
    return *v;
  }
  const std::string& text(const std::string& key) const { return get<std::string>(key); }
  std::int64_t scalar(const std::string& key) const {
    const auto& v = get<std::vector<std::int64_t>>(key);
    require(v.size() == 1, "record '" + key + "' is not a scalar");
    return v[0];
  }

  const std::map<std::string, Record>& records() const { return records_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    os.write("SFDACKPT", 8);
    put_raw<std::uint32_t>(os, 1);
    put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(records_.size()));
    for (const auto& [key, rec] : records_) {
      put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(key.size()));
      os.write(key.data(), static_cast<std::streamsize>(key.size()));
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            std::uint8_t type = 3;
            if constexpr (std::is_same_v<V, std::vector<float>>) type = 0;
            if constexpr (std::is_same_v<V, std::vector<double>>) type = 1;
            if constexpr (std::is_same_v<V, std::vector<std::int64_t>>) type = 2;
            put_raw<std::uint8_t>(os, type);
            put_raw<std::uint64_t>(os, static_cast<std::uint64_t>(v.size()));
            os.write(reinterpret_cast<const char*>(v.data()),
                     static_cast<std::streamsize>(v.size() * sizeof(typename V::value_type)));
          },
          rec);
    }
    if (!os) throw IoError("checkpoint write failed: " + path.string());
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "SFDACKPT", 8) != 0) throw IoError("not a checkpoint file: " + path.string());
    if (get_raw<std::uint32_t>(is) != 1) throw IoError("unsupported checkpoint version");
    const auto n = get_raw<std::uint32_t>(is);
    Archive a;
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string key(get_raw<std::uint32_t>(is), '\0');
      is.read(key.data(), static_cast<std::streamsize>(key.size()));
      const auto type = get_raw<std::uint8_t>(is);
      const auto count = get_raw<std::uint64_t>(is);
      auto read_vec = [&](auto tag) {
        using E = decltype(tag);
        std::vector<E> v(count);
        is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(E)));
        return v;
      };
      switch (type) {
        case 0: a.records_[key] = read_vec(float{}); break;
        case 1: a.records_[key] = read_vec(double{}); break;
        case 2: a.records_[key] = read_vec(std::int64_t{}); break;
        case 3: {
          std::string s(count, '\0');
          is.read(s.data(), static_cast<std::streamsize>(count));
          a.records_[key] = std::move(s);
          break;
        }
        default: throw IoError("corrupt checkpoint record type");
      }
      if (!is) throw IoError("truncated checkpoint: " + path.string());
    }
    return a;
  }

 private:
  template <typename V>
  static void put_raw(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  template <typename V>
  static V get_raw(std::istream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw IoError("truncated checkpoint");
    return v;
  }

  std::map<std::string, Record> records_;
};

// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> as_vector(const Archive& a, const std::string& key) {
  if constexpr (std::is_same_v<T, float>) return a.get<std::vector<float>>(key);
  else return a.get<std::vector<double>>(key);
}

inline std::vector<std::int64_t> encode_spec(const NetworkSpec& s) {
  std::vector<std::int64_t> v(s.block_filters.begin(), s.block_filters.end());
  v.push_back(s.num_classes);
  v.push_back(s.input_channels);
  return v;
}
inline NetworkSpec decode_spec(const std::vector<std::int64_t>& v) {
  require(v.size() == 11, "malformed network spec record");
  NetworkSpec s;
  for (std::size_t i = 0; i < 9; ++i) s.block_filters[i] = static_cast<int>(v[i]);
  s.num_classes = static_cast<int>(v[9]);
  s.input_channels = static_cast<int>(v[10]);
  return s;
}
inline std::vector<std::int64_t> encode_spec(const SCSpec& s) {
  std::vector<std::int64_t> v(s.layer_filters.begin(), s.layer_filters.end());
  v.push_back(s.kernel_size);
  v.push_back(s.input_channels);
  return v;
}
inline SCSpec decode_sc_spec(const std::vector<std::int64_t>& v) {
  require(v.size() >= 3, "malformed style-compensation spec record");
  SCSpec s;
  s.layer_filters.assign(v.begin(), v.end() - 2);
  s.kernel_size = static_cast<int>(v[v.size() - 2]);
  s.input_channels = static_cast<int>(v.back());
  return s;
}

/// Writes spec, parameters and running statistics of a network under `role`.
template <typename Net>
void store_network(Archive& a, const std::string& role, Net& net) {
  using T = typename std::remove_reference_t<decltype(net.trainable_params())>::value_type;
  using S = std::remove_pointer_t<T>;
  using Scalar = typename decltype(S::value)::value_type;
  a.put(role + ".spec", encode_spec(net.spec()));
  net.visit_params([&](const std::string& n, Param<Scalar>& p, bool) { a.put(role + ".param." + n, p.value); });
  net.visit_buffers([&](const std::string& n, std::vector<Scalar>& b) { a.put(role + ".buffer." + n, b); });
}

template <typename Net>
void restore_network(const Archive& a, const std::string& role, Net& net) {
  using T = typename std::remove_reference_t<decltype(net.trainable_params())>::value_type;
  using S = std::remove_pointer_t<T>;
  using Scalar = typename decltype(S::value)::value_type;
  const auto& spec_rec = a.get<std::vector<std::int64_t>>(role + ".spec");
  require(spec_rec == encode_spec(net.spec()), "checkpoint spec for '" + role + "' does not match the network");
  net.visit_params([&](const std::string& n, Param<Scalar>& p, bool) {
    auto v = as_vector<Scalar>(a, role + ".param." + n);
    require(v.size() == p.value.size(), "checkpoint tensor size mismatch: " + n);
    p.value = std::move(v);
  });
  net.visit_buffers([&](const std::string& n, std::vector<Scalar>& b) {
    auto v = as_vector<Scalar>(a, role + ".buffer." + n);
    require(v.size() == b.size(), "checkpoint buffer size mismatch: " + n);
    b = std::move(v);
  });
}

inline void store_optimizer(Archive& a, const std::string& role, const OptimizerState& s) {
  a.put(role + ".step", std::vector<std::int64_t>{s.step});
  a.put(role + ".slots", std::vector<std::int64_t>{static_cast<std::int64_t>(s.first.size()),
                                                     static_cast<std::int64_t>(s.second.size())});
  for (std::size_t i = 0; i < s.first.size(); ++i) a.put(role + ".first." + std::to_string(i), s.first[i]);
  for (std::size_t i = 0; i < s.second.size(); ++i) a.put(role + ".second." + std::to_string(i), s.second[i]);
}

inline void restore_optimizer(const Archive& a, const std::string& role, OptimizerState& s) {
  const auto& slots = a.get<std::vector<std::int64_t>>(role + ".slots");
  require(slots.size() == 2 && static_cast<std::size_t>(slots[0]) == s.first.size() &&
              static_cast<std::size_t>(slots[1]) == s.second.size(),
          "optimizer state for '" + role + "' does not match");
  s.step = a.scalar(role + ".step");
  for (std::size_t i = 0; i < s.first.size(); ++i) s.first[i] = a.get<std::vector<double>>(role + ".first." + std::to_string(i));
  for (std::size_t i = 0; i < s.second.size(); ++i) s.second[i] = a.get<std::vector<double>>(role + ".second." + std::to_string(i));
}

/// SHA-256 over the values of the selected parameters and buffers.
template <typename T>
std::string parameter_digest(UNet<T>& net, bool frozen_only) {
  Sha256 h;
  net.visit_params([&](const std::string& n, Param<T>& p, bool trainable) {
    if (frozen_only && trainable) return;
    h.update(n);
    h.update(std::span<const T>(p.value));
  });
  net.visit_buffers([&](const std::string& n, std::vector<T>& b) {
    if (frozen_only && net.is_trainable(n.substr(0, n.find('.')))) return;
    h.update(n);
    h.update(std::span<const T>(b));
  });
  return h.hex();
}

}  // namespace sfda::nn
