#pragma once

// Named trainable-parameter store, the Adam step, and the binary checkpoint
// format. Parameter payloads round-trip byte-exactly: names are kept in map
// order and matrix data is written raw.

#include "fbclip/autodiff.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fbclip {

class ParamStore {
 public:
  ad::Var add(const std::string& name, Mat init) {
    auto [it, inserted] = params_.emplace(name, ad::Var(std::move(init), true));
    if (!inserted) throw std::invalid_argument("param already registered: " + name);
    return it->second;
  }

  ad::Var get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no such param: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grads() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

  std::size_t size() const { return params_.size(); }

  const std::map<std::string, ad::Var>& entries() const { return params_; }

  std::map<std::string, Mat> values() const {
    std::map<std::string, Mat> out;
    for (const auto& [k, v] : params_) out.emplace(k, v.value());
    return out;
  }

  // Overwrites matching parameters in place; unknown names are an error,
  // missing names are left at their initial values.
  void load_values(const std::map<std::string, Mat>& values) {
    for (const auto& [k, m] : values) {
      auto it = params_.find(k);
      if (it == params_.end()) throw std::invalid_argument("checkpoint param unknown: " + k);
      require(it->second.rows() == m.rows() && it->second.cols() == m.cols(),
              "checkpoint param shape mismatch");
      it->second.mutable_value() = m;
    }
  }

 private:
  std::map<std::string, ad::Var> params_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& [name, handle] : store.entries()) {
      ad::Var var = handle;  // shared handle; mutates the stored node
      if (var.grad().size() == 0) continue;
      Mat& m = m_[name];
      Mat& v = v_[name];
      if (m.size() == 0) {
        m = Mat::Zero(var.rows(), var.cols());
        v = Mat::Zero(var.rows(), var.cols());
      }
      const Mat& g = var.grad();
      m = beta1_ * m + (1.0 - beta1_) * g;
      v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
      const Mat mhat = m / bc1;
      const Mat vhat = v / bc2;
      var.mutable_value().array() -=
          lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
    }
  }

  long step_count() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Mat> m_, v_;
};

// ---- checkpoint I/O ----

struct Checkpoint {
  std::map<std::string, Mat> params;
  std::string config_snapshot;
  std::uint64_t step = 0;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write("FBCK", 4);
  detail::write_u32(os, 1);  // format version
  detail::write_u64(os, ckpt.step);
  detail::write_u64(os, ckpt.config_snapshot.size());
  os.write(ckpt.config_snapshot.data(),
           static_cast<std::streamsize>(ckpt.config_snapshot.size()));
  detail::write_u32(os, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, m] : ckpt.params) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u64(os, static_cast<std::uint64_t>(m.rows()));
    detail::write_u64(os, static_cast<std::uint64_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
  }
  if (!os) throw std::runtime_error("checkpoint: short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FBCK", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t version = detail::read_u32(is);
  if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
  Checkpoint ckpt;
  ckpt.step = detail::read_u64(is);
  const std::uint64_t cfg_len = detail::read_u64(is);
  ckpt.config_snapshot.resize(cfg_len);
  is.read(ckpt.config_snapshot.data(), static_cast<std::streamsize>(cfg_len));
  const std::uint32_t n = detail::read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t name_len = detail::read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rows = static_cast<Eigen::Index>(detail::read_u64(is));
    const auto cols = static_cast<Eigen::Index>(detail::read_u64(is));
    Mat m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
    ckpt.params.emplace(std::move(name), std::move(m));
  }
  if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
  return ckpt;
}

}  // namespace fbclip
