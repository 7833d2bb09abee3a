#pragma once

// Checkpoint on disk: a text manifest at `path` and a tensor blob at
// `path.bin`. The manifest records every tensor's shape, offset, byte
// length and FNV-1a hash, plus the length and hash of the whole blob.
//
//   bmm-checkpoint 1
//   kind gan
//   blob model.ckpt.bin 123456 9a3f...
//   meta config.noise_dim 100
//   tensor gen/param/project.weight 2 100 2048 0 819200 1c2d...
//   end

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>

#include "bmm/dataflow.hpp"
#include "bmm/models.hpp"

namespace bmm {

inline constexpr const char* checkpoint_magic = "bmm-checkpoint";
inline constexpr int checkpoint_version = 1;

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

inline std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

inline std::uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16) throw FormatError("checkpoint: bad hash '" + s + "'");
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else throw FormatError("checkpoint: bad hash '" + s + "'");
  }
  return v;
}

inline void check_token(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos) {
    throw FormatError(std::string("checkpoint: ") + what + " '" + s +
                      "' must be a non-empty token without whitespace");
  }
}

inline std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  return manifest.string() + ".bin";
}

}  // namespace detail

inline bool known_checkpoint_kind(const std::string& kind) { return kind == "gan" || kind == "dae"; }

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (!known_checkpoint_kind(ck.kind)) throw FormatError("checkpoint: unknown model kind '" + ck.kind + "'");
  std::string blob;
  std::ostringstream tensors;
  for (const auto& [name, t] : ck.tensors) {
    detail::check_token(name, "tensor name");
    const std::size_t offset = blob.size();
    detail::put_floats(blob, t.data());
    const std::string_view bytes(blob.data() + offset, blob.size() - offset);
    tensors << "tensor " << name << ' ' << t.rank();
    for (auto d : t.shape()) tensors << ' ' << d;
    tensors << ' ' << offset << ' ' << bytes.size() << ' ' << detail::hex64(fnv1a64(bytes)) << '\n';
  }
  const auto blob_file = detail::blob_path(path);
  std::ostringstream m;
  m << checkpoint_magic << ' ' << checkpoint_version << '\n';
  m << "kind " << ck.kind << '\n';
  m << "blob " << blob_file.filename().string() << ' ' << blob.size() << ' '
    << detail::hex64(fnv1a64(blob)) << '\n';
  for (const auto& [k, v] : ck.meta) {
    detail::check_token(k, "meta key");
    if (v.find('\n') != std::string::npos) throw FormatError("checkpoint: meta value for " + k + " spans lines");
    m << "meta " << k << ' ' << v << '\n';
  }
  m << tensors.str() << "end\n";
  detail::write_file(blob_file, blob);
  detail::write_file(path, m.str());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::istringstream in(detail::read_file(path));
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line)) throw FormatError(std::string("checkpoint: truncated manifest, missing ") + what);
  };
  next_line("header");
  {
    std::istringstream h(line);
    std::string magic;
    int version = 0;
    if (!(h >> magic >> version) || magic != checkpoint_magic) {
      throw FormatError("checkpoint: " + path.string() + " is not a checkpoint manifest");
    }
    if (version != checkpoint_version) {
      throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
  }
  Checkpoint ck;
  next_line("kind");
  if (line.rfind("kind ", 0) != 0) throw FormatError("checkpoint: expected kind line");
  ck.kind = line.substr(5);
  if (!known_checkpoint_kind(ck.kind)) throw FormatError("checkpoint: unknown model kind '" + ck.kind + "'");

  next_line("blob");
  std::string tag, blob_name, blob_hash;
  std::size_t blob_size = 0;
  {
    std::istringstream b(line);
    if (!(b >> tag >> blob_name >> blob_size >> blob_hash) || tag != "blob") {
      throw FormatError("checkpoint: malformed blob line");
    }
  }
  const std::string blob = detail::read_file(path.parent_path() / blob_name);
  if (blob.size() != blob_size) {
    throw IntegrityError("checkpoint: blob is " + std::to_string(blob.size()) +
                         " bytes, manifest records " + std::to_string(blob_size));
  }
  if (fnv1a64(blob) != detail::parse_hex64(blob_hash)) {
    throw IntegrityError("checkpoint: blob hash mismatch for " + blob_name);
  }

  bool ended = false;
  std::size_t covered = 0;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    if (line.rfind("meta ", 0) == 0) {
      const auto sp = line.find(' ', 5);
      if (sp == std::string::npos) throw FormatError("checkpoint: malformed meta line");
      ck.meta[line.substr(5, sp - 5)] = line.substr(sp + 1);
      continue;
    }
    std::istringstream t(line);
    std::string name, hash;
    std::size_t rank = 0, offset = 0, nbytes = 0;
    if (!(t >> tag >> name >> rank) || tag != "tensor" || rank == 0 || rank > 8) {
      throw FormatError("checkpoint: malformed line '" + line + "'");
    }
    Shape shape(rank);
    for (auto& d : shape) {
      if (!(t >> d)) throw FormatError("checkpoint: malformed shape for " + name);
    }
    if (!(t >> offset >> nbytes >> hash)) throw FormatError("checkpoint: malformed entry for " + name);
    Tensor<float> value(shape);
    if (nbytes != 4 * value.size() || offset > blob.size() || nbytes > blob.size() - offset) {
      throw IntegrityError("checkpoint: tensor " + name + " range [" + std::to_string(offset) + "," +
                           std::to_string(offset + nbytes) + ") does not fit shape " +
                           shape_string(shape) + " in a blob of " + std::to_string(blob.size()) + " bytes");
    }
    const std::string_view bytes(blob.data() + offset, nbytes);
    if (fnv1a64(bytes) != detail::parse_hex64(hash)) {
      throw IntegrityError("checkpoint: checksum mismatch for tensor " + name);
    }
    detail::get_floats(reinterpret_cast<const unsigned char*>(bytes.data()), value.data());
    if (!ck.tensors.emplace(name, std::move(value)).second) {
      throw FormatError("checkpoint: duplicate tensor " + name);
    }
    covered += nbytes;
  }
  if (!ended) throw FormatError("checkpoint: truncated manifest, missing end marker");
  if (covered != blob.size()) {
    throw IntegrityError("checkpoint: manifest covers " + std::to_string(covered) + " of " +
                         std::to_string(blob.size()) + " blob bytes");
  }
  return ck;
}

}  // namespace bmm
