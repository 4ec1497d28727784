#include "dfuse/archive.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "dfuse/error.hpp"

namespace dfuse {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace {

constexpr std::array<char, 8> kMagic{'D', 'F', 'U', 'S', 'E', 'A', 'R', 'C'};

template <typename V>
void put(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::ifstream& in, const std::filesystem::path& path) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw FormatError("truncated archive " + path.string());
  return v;
}

std::string get_bytes(std::ifstream& in, std::uint64_t n,
                      const std::filesystem::path& path) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw FormatError("truncated archive " + path.string());
  return s;
}

}  // namespace

const TensorRecord* TensorArchive::find(const std::string& name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(),
                         [&](const TensorRecord& r) { return r.name == name; });
  return it == tensors.end() ? nullptr : &*it;
}

void TensorArchive::add(std::string name, ad::Shape shape,
                        std::vector<float> values) {
  if (values.size() != shape.numel()) {
    throw ShapeError("archive tensor " + name + " has wrong value count");
  }
  tensors.push_back({std::move(name), shape, std::move(values)});
}

void save_archive(const TensorArchive& archive,
                  const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write archive " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put(out, archive.version);
  put(out, static_cast<std::uint64_t>(archive.metadata.size()));
  out.write(archive.metadata.data(),
            static_cast<std::streamsize>(archive.metadata.size()));
  put(out, static_cast<std::uint64_t>(archive.tensors.size()));
  for (const auto& t : archive.tensors) {
    put(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    for (int d : {t.shape.n, t.shape.c, t.shape.h, t.shape.w}) {
      put(out, static_cast<std::int32_t>(d));
    }
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  }
  if (!out) throw FormatError("failed writing archive " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("missing file: " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) {
    throw IncompatibleCheckpoint(path.string() + " is not a dfuse archive");
  }
  TensorArchive archive;
  archive.version = get<std::uint32_t>(in, path);
  if (archive.version != TensorArchive::kFormatVersion) {
    throw IncompatibleCheckpoint(
        "archive " + path.string() + " has format version " +
        std::to_string(archive.version) + ", expected " +
        std::to_string(TensorArchive::kFormatVersion));
  }
  archive.metadata = get_bytes(in, get<std::uint64_t>(in, path), path);
  const auto count = get<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord rec;
    rec.name = get_bytes(in, get<std::uint32_t>(in, path), path);
    rec.shape.n = get<std::int32_t>(in, path);
    rec.shape.c = get<std::int32_t>(in, path);
    rec.shape.h = get<std::int32_t>(in, path);
    rec.shape.w = get<std::int32_t>(in, path);
    if (rec.shape.n < 0 || rec.shape.c < 0 || rec.shape.h < 0 || rec.shape.w < 0) {
      throw FormatError("corrupt tensor shape in " + path.string());
    }
    rec.values.resize(rec.shape.numel());
    in.read(reinterpret_cast<char*>(rec.values.data()),
            static_cast<std::streamsize>(rec.values.size() * sizeof(float)));
    if (!in) throw FormatError("truncated archive " + path.string());
    archive.tensors.push_back(std::move(rec));
  }
  return archive;
}

}  // namespace dfuse
