#include "protoalign/params.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "protoalign/ntsr.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace protoalign {

Tensor ParameterStore::add(const std::string& name, Tensor t, bool trainable) {
  require(!entries_.count(name), ErrKind::State, "parameter already registered: " + name);
  t.set_requires_grad(trainable);
  entries_[name] = Entry{t, trainable};
  return t;
}

Tensor ParameterStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  require(it != entries_.end(), ErrKind::State, "unknown parameter: " + name);
  return it->second.tensor;
}

bool ParameterStore::has(const std::string& name) const { return entries_.count(name) != 0; }

void ParameterStore::zero_grads() {
  for (auto& [name, e] : entries_) e.tensor.zero_grad();
}

ParameterStore::Snapshot ParameterStore::snapshot() const {
  Snapshot s;
  for (const auto& [name, e] : entries_) {
    auto v = e.tensor.values();
    s.emplace(name, std::vector<double>(v.begin(), v.end()));
  }
  return s;
}

void ParameterStore::restore(const Snapshot& s) {
  for (const auto& [name, vals] : s) {
    auto it = entries_.find(name);
    require(it != entries_.end(), ErrKind::State, "restore: unknown parameter " + name);
    require(it->second.tensor.raw().size() == vals.size(), ErrKind::Shape,
            "restore: size mismatch for " + name);
    it->second.tensor.raw() = vals;
  }
}

namespace {

std::string sanitize(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    if (c == '/' || c == '\\') c = '~';
  }
  return out;
}

}  // namespace

void ParameterStore::save(const std::string& dir, const std::string& meta_json) const {
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["format"] = "protoalign-checkpoint-v1";
  manifest["meta"] = meta_json.empty() ? ordered_json::object() : ordered_json::parse(meta_json);
  ordered_json plist = ordered_json::array();
  for (const auto& [name, e] : entries_) {
    const std::string file = sanitize(name) + ".ntsr";
    write_ntsr_f64((fs::path(dir) / file).string(), e.tensor.shape(), e.tensor.values());
    ordered_json p;
    p["name"] = name;
    p["file"] = file;
    p["shape"] = e.tensor.shape();
    p["trainable"] = e.trainable;
    plist.push_back(std::move(p));
  }
  manifest["params"] = std::move(plist);
  std::ofstream f(fs::path(dir) / "manifest.json", std::ios::trunc);
  require(f.good(), ErrKind::Io, "checkpoint: cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

ParameterStore ParameterStore::load(const std::string& dir, std::string* meta_json_out) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream f(mpath);
  require(f.good(), ErrKind::Io, "checkpoint: missing manifest: " + mpath.string());
  ordered_json manifest;
  try {
    f >> manifest;
  } catch (const std::exception& e) {
    fail(ErrKind::Io, "checkpoint: bad manifest " + mpath.string() + ": " + e.what());
  }
  require(manifest.value("format", "") == "protoalign-checkpoint-v1", ErrKind::Io,
          "checkpoint: unrecognized manifest format in " + dir);
  ParameterStore store;
  for (const auto& p : manifest.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    const std::string file = p.at("file").get<std::string>();
    NtsrData d = read_ntsr((fs::path(dir) / file).string());
    require(d.dtype == NtsrDtype::F64, ErrKind::Io, "checkpoint: parameter dtype must be f64");
    Shape expect = p.at("shape").get<Shape>();
    require(d.shape == expect, ErrKind::Shape, "checkpoint: shape mismatch for " + name);
    store.add(name, Tensor::from_data(d.shape, std::move(d.f64)),
              p.at("trainable").get<bool>());
  }
  if (meta_json_out) *meta_json_out = manifest.at("meta").dump();
  return store;
}

void Adam::step(ParameterStore& params, const std::function<bool(const std::string&)>& filter) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (auto& [name, e] : params.entries()) {
    if (!e.trainable) continue;
    if (filter && !filter(name)) continue;
    require(e.tensor.has_grad(), ErrKind::State, "adam: missing gradient for parameter " + name);
    auto& slot = slots_[name];
    auto& value = e.tensor.raw();
    auto grad = e.tensor.grad();
    if (slot.m.size() != value.size()) {
      slot.m.assign(value.size(), 0.0);
      slot.v.assign(value.size(), 0.0);
    }
    for (size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
      slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    e.tensor.zero_grad();
  }
}

}  // namespace protoalign
