#include "grecall/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "grecall/errors.hpp"

namespace grecall::nn {

Parameter& ParameterSet::add(const std::string& name, std::vector<int> shape) {
  if (index_.count(name)) {
    throw std::runtime_error("duplicate parameter name: " + name);
  }
  index_[name] = params_.size();
  Parameter p;
  p.name = name;
  p.value = Tensor(shape);
  p.grad = Tensor(std::move(shape));
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParameterSet::add_normal(const std::string& name,
                                    std::vector<int> shape, uint64_t seed,
                                    double stddev) {
  Parameter& p = add(name, std::move(shape));
  Rng rng(seed, name);
  for (double& v : p.value.data) v = rng.normal(0.0, stddev);
  return p;
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::runtime_error("no such parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::runtime_error("no such parameter: " + name);
  return params_[it->second];
}

void ParameterSet::zero_grads() {
  for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
}

int64_t ParameterSet::num_values() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void AdamState::step(ParameterSet& ps) {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t pi = 0; pi < ps.size(); ++pi) {
    Parameter& p = ps[pi];
    for (double gv : p.grad.data) {
      if (!std::isfinite(gv)) {
        throw NumericError("adam: non-finite gradient in parameter '" + p.name + "'");
      }
    }
    auto it = moments_.find(p.name);
    if (it == moments_.end()) {
      it = moments_.emplace(p.name, std::make_pair(Tensor(p.value.shape),
                                                   Tensor(p.value.shape))).first;
    }
    Tensor& m = it->second.first;
    Tensor& v = it->second.second;
    for (int64_t i = 0; i < p.value.size(); ++i) {
      double gv = p.grad.at(i);
      m.at(i) = cfg_.beta1 * m.at(i) + (1.0 - cfg_.beta1) * gv;
      v.at(i) = cfg_.beta2 * v.at(i) + (1.0 - cfg_.beta2) * gv * gv;
      double mh = m.at(i) / bc1;
      double vh = v.at(i) / bc2;
      p.value.at(i) -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

double cosine_lr(double lr0, int64_t step, int64_t total, double floor_frac) {
  if (total <= 1) return lr0;
  double t = static_cast<double>(step) / static_cast<double>(total - 1);
  if (t > 1.0) t = 1.0;
  double c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
  return lr0 * (floor_frac + (1.0 - floor_frac) * c);
}

namespace {

constexpr char kMagic[] = "GRECALL-CKPT-v1\n";

void write_u32(std::ofstream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_str(std::ofstream& out, const std::string& s) {
  write_u32(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::ifstream& in) {
  uint32_t n = read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParameterSet& ps,
                     const std::map<std::string, std::string>& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic) - 1);
  write_u32(out, static_cast<uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    write_str(out, k);
    write_str(out, v);
  }
  write_u32(out, static_cast<uint32_t>(ps.size()));
  for (size_t i = 0; i < ps.size(); ++i) {
    const Parameter& p = ps[i];
    write_str(out, p.name);
    write_u32(out, static_cast<uint32_t>(p.value.shape.size()));
    for (int d : p.value.shape) write_u32(out, static_cast<uint32_t>(d));
    // Raw doubles; this project only targets little-endian hosts.
    out.write(reinterpret_cast<const char*>(p.value.data.data()),
              static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

std::map<std::string, std::string> load_checkpoint(const std::string& path,
                                                   ParameterSet& ps) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError(path);
  char magic[sizeof(kMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("bad checkpoint magic in " + path);
  }
  std::map<std::string, std::string> meta;
  uint32_t nmeta = read_u32(in);
  for (uint32_t i = 0; i < nmeta; ++i) {
    std::string k = read_str(in);
    meta[k] = read_str(in);
  }
  uint32_t nparams = read_u32(in);
  for (uint32_t i = 0; i < nparams; ++i) {
    std::string name = read_str(in);
    uint32_t rank = read_u32(in);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_u32(in));
    Parameter& p = ps.has(name) ? ps.at(name) : ps.add(name, shape);
    if (p.value.shape != shape) {
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    }
    in.read(reinterpret_cast<char*>(p.value.data.data()),
            static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint " + path);
  }
  return meta;
}

void copy_values(const ParameterSet& src, ParameterSet& dst) {
  for (size_t i = 0; i < src.size(); ++i) {
    dst.at(src[i].name).value = src[i].value;
  }
}

ParameterSet clone(const ParameterSet& src) {
  ParameterSet out;
  for (size_t i = 0; i < src.size(); ++i) {
    Parameter& p = out.add(src[i].name, src[i].value.shape);
    p.value = src[i].value;
  }
  return out;
}

}  // namespace grecall::nn
