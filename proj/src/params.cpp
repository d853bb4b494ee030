#include "livesketch/numerics/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "livesketch/numerics/errors.hpp"

namespace livesketch::nn {

Parameter& ParameterStore::create(const std::string& name, Tensor value) {
  if (by_name_.count(name)) throw ContractError("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(name, std::move(value)));
  Parameter& p = *params_.back();
  p.zero_grad();
  by_name_[name] = &p;
  return p;
}

Parameter& ParameterStore::create_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = stddev * rng.normal();
  return create(name, std::move(t));
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (!p) throw ContractError("unknown parameter: " + name);
  return *p;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

Checkpoint Checkpoint::from(const ParameterStore& store) {
  Checkpoint c;
  for (const Parameter* p : store.all()) c.tensors[p->name] = p->value;
  return c;
}

void Checkpoint::apply(ParameterStore& store) const {
  for (Parameter* p : store.all()) {
    auto it = tensors.find(p->name);
    if (it == tensors.end()) throw ContractError("checkpoint is missing parameter " + p->name);
    if (it->second.shape() != p->value.shape()) {
      throw DimensionError("checkpoint parameter " + p->name + " has shape " + shape_string(it->second.shape()) +
                           ", model expects " + shape_string(p->value.shape()));
    }
    p->value = it->second;
    p->zero_grad();
  }
}

namespace {

constexpr char kMagic[8] = {'L', 'S', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string Checkpoint::serialize() const {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, std::uint32_t(name.size()));
    out += name;
    put<std::uint32_t>(out, std::uint32_t(t.shape().size()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    const auto* bytes = reinterpret_cast<const char*>(t.data());
    out.append(bytes, t.size() * sizeof(double));
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& in) {
  if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(in, pos);
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto count = take<std::uint32_t>(in, pos);
  Checkpoint c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(in, pos);
    if (pos + len > in.size()) throw std::runtime_error("checkpoint truncated");
    std::string name = in.substr(pos, len);
    pos += len;
    const auto rank = take<std::uint32_t>(in, pos);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(in, pos);
    const std::size_t n = shape_size(shape);
    if (pos + n * sizeof(double) > in.size()) throw std::runtime_error("checkpoint truncated");
    std::vector<double> values(n);
    std::memcpy(values.data(), in.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    c.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (pos != in.size()) throw std::runtime_error("checkpoint has trailing bytes");
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = serialize();
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

Var Binder::operator()(Parameter& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  Var v = frozen_ ? tape_.constant(p.value) : tape_.param(p);
  bound_.emplace(&p, v);
  return v;
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.shape(), 0.0);
    v_.emplace_back(p->value.shape(), 0.0);
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Adam::step() {
  for (Parameter* p : params_) {
    if (p->grad.shape() != p->value.shape()) {
      throw DimensionError("adam: gradient " + shape_string(p->grad.shape()) + " does not match parameter " +
                           p->name + " " + shape_string(p->value.shape()));
    }
  }
  double clip = 1.0;
  if (config_.clip_norm > 0) {
    double sq = 0.0;
    for (Parameter* p : params_) {
      for (double g : p->grad.values()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) clip = config_.clip_norm / norm;
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(steps_));
  const double c2 = 1.0 - std::pow(b2, double(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& w = params_[k]->value.storage();
    const auto& g = params_[k]->grad.storage();
    auto& m = m_[k].storage();
    auto& v = v_[k].storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = clip * g[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      w[i] -= config_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
    }
  }
}

}  // namespace livesketch::nn
