#include "stainforge/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include "stainforge/textio.hpp"

namespace stainforge::model {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'F', 'T', 'W'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }

struct Reader {
  std::string_view bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw UserError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

std::string encode_arrays(const std::vector<NamedArray>& arrays, DType dtype) {
  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    if (Tensor::count(a.shape) != a.data.size()) throw Error("array " + a.name + " shape/data mismatch");
    put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    put_u32(out, static_cast<std::uint32_t>(dtype));
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (int d : a.shape) put_u32(out, static_cast<std::uint32_t>(d));
    if (dtype == DType::kF32) {
      for (double v : a.data) {
        const float f = static_cast<float>(v);
        out.append(reinterpret_cast<const char*>(&f), 4);
      }
    } else {
      out.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * 8);
    }
  }
  return out;
}

std::vector<NamedArray> decode_arrays(std::string_view bytes) {
  Reader r{bytes};
  if (r.take(4) != std::string_view(kMagic, 4)) throw UserError("not a stainforge weight file");
  if (r.u32() != kVersion) throw UserError("unsupported weight file version");
  const std::uint32_t count = r.u32();
  std::vector<NamedArray> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = std::string(r.take(r.u32()));
    const auto dtype = static_cast<DType>(r.u32());
    const std::uint32_t rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) a.shape.push_back(static_cast<int>(r.u32()));
    a.data.resize(Tensor::count(a.shape));
    if (dtype == DType::kF32) {
      const auto raw = r.take(a.data.size() * 4);
      for (std::size_t k = 0; k < a.data.size(); ++k) {
        float f;
        std::memcpy(&f, raw.data() + 4 * k, 4);
        a.data[k] = f;
      }
    } else if (dtype == DType::kF64) {
      const auto raw = r.take(a.data.size() * 8);
      std::memcpy(a.data.data(), raw.data(), raw.size());
    } else {
      throw UserError("unknown dtype in weight file");
    }
    out.push_back(std::move(a));
  }
  if (r.pos != bytes.size()) throw UserError("trailing bytes in weight file");
  return out;
}

void write_arrays(const std::filesystem::path& path, const std::vector<NamedArray>& arrays, DType dtype) {
  textio::write_file_atomic(path, encode_arrays(arrays, dtype));
}

std::vector<NamedArray> read_arrays(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw UserError("checkpoint not found: " + path.string());
  return decode_arrays(textio::read_file(path));
}

std::vector<NamedArray> snapshot(Translator& model) {
  std::vector<NamedArray> out;
  for (Parameter* p : model.parameters()) out.push_back({p->name, p->value.shape, p->value.data});
  return out;
}

void restore(Translator& model, const std::vector<NamedArray>& arrays) {
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  for (Parameter* p : model.parameters()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw UserError("checkpoint lacks parameter " + p->name);
    if (it->second->shape != p->value.shape) {
      throw UserError("checkpoint shape mismatch for " + p->name + ": " + shape_string(it->second->shape) + " vs " +
                      shape_string(p->value.shape));
    }
    p->value.data = it->second->data;
  }
}

void save_checkpoint(const std::filesystem::path& path, Translator& model, nlohmann::ordered_json meta) {
  meta["format"] = "stainforge-checkpoint";
  meta["translator"] = model.config().to_json();
  meta["lora"] = model.lora() ? nlohmann::ordered_json(lora_to_json(*model.lora())) : nlohmann::ordered_json();
  write_arrays(path, snapshot(model), DType::kF32);
  textio::write_file_atomic(sidecar_path(path), meta.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(side)) throw UserError("checkpoint sidecar not found: " + side.string());
  LoadedCheckpoint out;
  try {
    out.meta = nlohmann::json::parse(textio::read_file(side));
  } catch (const nlohmann::json::exception& e) {
    throw UserError("invalid checkpoint sidecar " + side.string() + ": " + e.what());
  }
  const auto config = TranslatorConfig::from_json(out.meta.at("translator"));
  const std::uint64_t seed = out.meta.value("seed", std::uint64_t{0});
  out.model = std::make_unique<Translator>(config, seed);
  if (out.meta.contains("lora") && !out.meta["lora"].is_null()) {
    out.model->apply_lora(lora_from_json(out.meta["lora"]), seed);
  }
  restore(*out.model, read_arrays(path));
  return out;
}

}  // namespace stainforge::model
