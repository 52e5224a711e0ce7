#include "dscm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace dscm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint arrays are written in native little-endian order");

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw CheckpointError("checkpoint has no tensor named " + name);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

void Checkpoint::add_store(const std::string& prefix, const ParamStore& ps) {
  for (const auto& [name, t] : ps.items()) add(prefix + name, t);
}

void Checkpoint::load_store(const std::string& prefix, ParamStore& ps) const {
  std::vector<Tensor> values;
  for (const std::string& name : ps.names()) {
    values.push_back(get(prefix + name));
  }
  ps.assign_values(values);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = Checkpoint::kFormatVersion;
  header["precision"] = ckpt.precision == Precision::f64 ? "f64" : "f32";
  header["step_counter"] = ckpt.step_counter;
  header["ema"] = ckpt.has_ema;
  header["meta"] = ckpt.meta.is_null() ? nlohmann::json::object() : ckpt.meta;
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    names.push_back({{"name", name}, {"shape", t.shape()}});
  }
  header["tensors"] = names;
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");
  const char magic[4] = {'D', 'S', 'C', 'M'};
  f.write(magic, 4);
  const std::uint32_t hl = static_cast<std::uint32_t>(hs.size());
  f.write(reinterpret_cast<const char*>(&hl), 4);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (ckpt.precision == Precision::f64) {
      f.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
    } else {
      std::vector<float> buf(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t[i]);
      f.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
  }
  if (!f) throw CheckpointError("write failure on " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "DSCM", 4) != 0) {
    throw CheckpointError(path + ": not a parameter container (bad magic)");
  }
  std::uint32_t hl = 0;
  if (!f.read(reinterpret_cast<char*>(&hl), 4)) {
    throw CheckpointError(path + ": truncated header length");
  }
  std::string hs(hl, '\0');
  if (!f.read(hs.data(), hl)) throw CheckpointError(path + ": truncated header");
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw CheckpointError(path + ": corrupt header JSON");
  const int version = header.value("format_version", -1);
  if (version != Checkpoint::kFormatVersion) {
    throw CheckpointError(path + ": incompatible format version " + std::to_string(version) +
                          " (expected " + std::to_string(Checkpoint::kFormatVersion) + ")");
  }

  Checkpoint ckpt;
  const std::string prec = header.value("precision", "f64");
  ckpt.precision = prec == "f32" ? Precision::f32 : Precision::f64;
  ckpt.step_counter = header.value("step_counter", std::int64_t{0});
  ckpt.has_ema = header.value("ema", false);
  ckpt.meta = header.value("meta", nlohmann::json::object());

  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    std::vector<double> data(n);
    if (ckpt.precision == Precision::f64) {
      if (!f.read(reinterpret_cast<char*>(data.data()),
                  static_cast<std::streamsize>(n * sizeof(double)))) {
        throw CheckpointError(path + ": truncated array for tensor " + name);
      }
    } else {
      std::vector<float> buf(n);
      if (!f.read(reinterpret_cast<char*>(buf.data()),
                  static_cast<std::streamsize>(n * sizeof(float)))) {
        throw CheckpointError(path + ": truncated array for tensor " + name);
      }
      for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(buf[i]);
    }
    Tensor t = Tensor::from_data(shape, std::move(data));
    if (ckpt.precision == Precision::f32) t = t.to_precision(Precision::f32);
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  // Trailing garbage also counts as corruption.
  char extra;
  if (f.read(&extra, 1)) throw CheckpointError(path + ": trailing bytes after arrays");
  return ckpt;
}

bool files_identical(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return ca == cb;
}

}  // namespace dscm
