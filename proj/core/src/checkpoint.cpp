#include "tokenunlearn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "tokenunlearn/errors.hpp"

namespace tokenunlearn {
namespace {

constexpr char kMagic[8] = {'T', 'U', 'L', 'M', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* field) {
  char buf[sizeof(T)];
  if (!in.read(buf, sizeof(T))) throw ParseError(1, std::string("truncated checkpoint at ") + field);
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

void put_doubles(std::ostream& out, std::span<const double> values) {
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
}

std::vector<double> get_doubles(std::istream& in, std::size_t n, const char* field) {
  std::vector<double> values(n);
  if (!in.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(n * sizeof(double)))) {
    throw ParseError(1, std::string("truncated checkpoint in ") + field);
  }
  return values;
}

}  // namespace

void write_checkpoint(const ModelState& model, std::ostream& out) {
  const ModelConfig& cfg = model.config();
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::int32_t>(out, cfg.vocab_size);
  put<std::int32_t>(out, cfg.d_model);
  put<std::int32_t>(out, cfg.d_hidden);
  put<std::int32_t>(out, cfg.n_layers);
  put<std::int32_t>(out, cfg.context_length);
  put<std::uint8_t>(out, model.has_reference() ? 1 : 0);
  put<std::uint64_t>(out, model.num_params());
  put_doubles(out, model.params());
  if (model.has_reference()) put_doubles(out, model.reference());
  if (!out) throw IoError("failed writing checkpoint");
}

ModelState read_checkpoint(std::istream& in) {
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(1, "not a checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw ParseError(1, "unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  cfg.vocab_size = get<std::int32_t>(in, "vocab_size");
  cfg.d_model = get<std::int32_t>(in, "d_model");
  cfg.d_hidden = get<std::int32_t>(in, "d_hidden");
  cfg.n_layers = get<std::int32_t>(in, "n_layers");
  cfg.context_length = get<std::int32_t>(in, "context_length");
  const auto has_reference = get<std::uint8_t>(in, "has_reference");
  if (has_reference > 1) throw ParseError(1, "invalid has_reference flag");
  const auto n = get<std::uint64_t>(in, "parameter count");

  ModelState model(cfg);
  if (n != model.num_params()) {
    throw ParseError(1, "parameter count " + std::to_string(n) + " does not match config (" +
                            std::to_string(model.num_params()) + ")");
  }
  model.set_params(get_doubles(in, n, "theta"));
  if (has_reference) model.restore_reference(get_doubles(in, n, "theta_o"));
  return model;
}

void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(model, out);
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace tokenunlearn
