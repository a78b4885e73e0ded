#include "hted/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include <nlohmann/json.hpp>

#include "hted/common/errors.hpp"
#include "hted/common/files.hpp"

namespace hted::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'H', 'T', 'E', 'D'};
// An edit delta is stored as three f32 terms whose double sum is exact.
constexpr int kDeltaTerms = 3;

std::string delta_name(std::size_t layer, int term) {
  return "blocks." + std::to_string(layer) + ".w_down.edit_delta." + std::to_string(term);
}

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(out, d);
  for (double v : t.values()) put<float>(out, static_cast<float>(v));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint is truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const TransformerModel& model) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string config = nlohmann::json(model.config()).dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  for (const auto& p : model.parameters()) put_tensor(out, p.name, *p.tensor);
  for (std::size_t l = 0; l < model.config().n_layers; ++l) {
    if (!model.has_edit(l)) continue;
    Tensor rest = model.down_projection_delta(l);
    for (int term = 0; term < kDeltaTerms; ++term) {
      Tensor part(rest.shape());
      for (std::size_t i = 0; i < rest.size(); ++i) {
        part[i] = static_cast<double>(static_cast<float>(rest[i]));
        rest[i] -= part[i];
      }
      put_tensor(out, delta_name(l, term), part);
    }
  }
  return out;
}

TransformerModel deserialize_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4) != std::string_view(kMagic, 4)) throw FormatError("not a checkpoint: bad magic bytes");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
  }
  const auto config_len = in.get<std::uint32_t>();
  ModelConfig config;
  try {
    config = nlohmann::json::parse(in.take(config_len)).get<ModelConfig>();
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid checkpoint config: ") + e.what());
  } catch (const InputError& e) {
    throw FormatError(std::string("invalid checkpoint config: ") + e.what());
  }

  std::map<std::string, Tensor, std::less<>> tensors;
  while (!in.done()) {
    const auto name_len = in.get<std::uint32_t>();
    std::string name(in.take(name_len));
    const auto rank = in.get<std::uint32_t>();
    if (rank > 2) throw FormatError("tensor " + name + " has unsupported rank " + std::to_string(rank));
    ad::Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(in.get<std::uint64_t>()));
    const std::size_t n = ad::shape_product(shape);
    if (n > bytes.size()) throw FormatError("checkpoint is truncated");
    std::vector<double> data(n);
    for (auto& v : data) v = static_cast<double>(in.get<float>());
    if (!tensors.emplace(name, Tensor(std::move(shape), std::move(data))).second) {
      throw FormatError("duplicate tensor " + name);
    }
  }

  TransformerModel model(config);
  for (auto& p : model.parameters()) {
    auto it = tensors.find(p.name);
    if (it == tensors.end()) throw FormatError("checkpoint is missing tensor " + p.name);
    if (it->second.shape() != p.tensor->shape()) {
      throw FormatError("tensor " + p.name + " has shape " + it->second.shape_string() + ", expected " +
                        p.tensor->shape_string());
    }
    *p.tensor = std::move(it->second);
    tensors.erase(it);
  }
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    if (!tensors.contains(delta_name(l, 0))) continue;
    Tensor total;
    for (int term = 0; term < kDeltaTerms; ++term) {
      auto it = tensors.find(delta_name(l, term));
      if (it == tensors.end()) throw FormatError("checkpoint is missing tensor " + delta_name(l, term));
      if (term == 0) {
        total = std::move(it->second);
      } else {
        if (it->second.shape() != total.shape()) throw FormatError("edit delta terms disagree in shape");
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += it->second[i];
      }
      tensors.erase(it);
    }
    model.set_down_projection_delta(l, std::move(total));
  }
  if (!tensors.empty()) throw FormatError("checkpoint has unexpected tensor " + tensors.begin()->first);
  return model;
}

void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(model));
}

TransformerModel load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace hted::model
