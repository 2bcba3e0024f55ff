#pragma once

// Denoiser checkpoint: little-endian binary
//   "TFNET1" | u32 data_dim, embed_dim, num_steps, activation, num_layers |
//   num_layers x (u32 in, u32 out) | u64 param_count | f64 params...
// with a JSON sidecar `<path>.json` describing architecture and digests.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajfx/common.hpp"
#include "trajfx/denoiser.hpp"
#include "trajfx/error.hpp"

namespace trajfx {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[6] = {'T', 'F', 'N', 'E', 'T', '1'};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("truncated checkpoint");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string serialize_params(const DenoiserParams& p) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(out, p.data_dim);
  detail::put<std::uint32_t>(out, p.embed_dim);
  detail::put<std::uint32_t>(out, p.num_steps);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.activation));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.layers.size()));
  for (const auto& l : p.layers) {
    detail::put<std::uint32_t>(out, l.in);
    detail::put<std::uint32_t>(out, l.out);
  }
  detail::put<std::uint64_t>(out, p.theta.size());
  out.append(reinterpret_cast<const char*>(p.theta.data()), p.theta.size() * sizeof(double));
  return out;
}

inline DenoiserParams deserialize_params(const std::string& in) {
  if (in.size() < sizeof kCheckpointMagic || std::memcmp(in.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw FormatError("not a denoiser checkpoint (bad magic)");
  std::size_t pos = sizeof kCheckpointMagic;
  const auto data_dim = detail::take<std::uint32_t>(in, pos);
  const auto embed_dim = detail::take<std::uint32_t>(in, pos);
  const auto num_steps = detail::take<std::uint32_t>(in, pos);
  const auto act = detail::take<std::uint32_t>(in, pos);
  const auto num_layers = detail::take<std::uint32_t>(in, pos);
  if (act != static_cast<std::uint32_t>(Activation::kSiLU)) throw FormatError("unknown activation code");
  if (num_layers < 1 || num_layers > 1024) throw FormatError("implausible layer count");
  std::vector<int> hidden;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes;
  for (std::uint32_t l = 0; l < num_layers; ++l) {
    const auto a = detail::take<std::uint32_t>(in, pos);
    const auto b = detail::take<std::uint32_t>(in, pos);
    shapes.emplace_back(a, b);
    if (l + 1 < num_layers) hidden.push_back(static_cast<int>(b));
  }
  DenoiserParams p;
  try {
    p = DenoiserParams::zeros(static_cast<int>(data_dim), hidden, static_cast<int>(embed_dim),
                              static_cast<int>(num_steps));
  } catch (const ParameterError& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  for (std::uint32_t l = 0; l < num_layers; ++l)
    if (static_cast<std::uint32_t>(p.layers[l].in) != shapes[l].first ||
        static_cast<std::uint32_t>(p.layers[l].out) != shapes[l].second)
      throw FormatError("checkpoint layer shapes do not chain");
  const auto count = detail::take<std::uint64_t>(in, pos);
  if (count != p.theta.size()) throw FormatError("checkpoint parameter count does not match its layers");
  if (in.size() - pos != count * sizeof(double)) throw FormatError("checkpoint payload has wrong length");
  std::memcpy(p.theta.data(), in.data() + pos, count * sizeof(double));
  if (!all_finite(p.theta)) throw FormatError("checkpoint holds non-finite parameters");
  return p;
}

inline nlohmann::ordered_json checkpoint_sidecar(const DenoiserParams& p) {
  return {{"format", "TFNET1"},
          {"arch", p.arch_string()},
          {"data_dim", p.data_dim},
          {"embed_dim", p.embed_dim},
          {"num_steps", p.num_steps},
          {"activation", activation_name(p.activation)},
          {"hidden_widths", p.hidden_widths()},
          {"param_count", p.param_count()},
          {"arch_hash", hex64(p.arch_hash())},
          {"weights_digest", hex64(p.weights_digest())}};
}

inline void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& p) {
  const std::string bytes = serialize_params(p);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os || !os.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
      throw Error("cannot write checkpoint " + path.string());
  }
  std::ofstream js(path.string() + ".json", std::ios::trunc);
  js << checkpoint_sidecar(p).dump(2) << '\n';
}

inline DenoiserParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PipelineError("missing checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_params(bytes);
}

}  // namespace trajfx
