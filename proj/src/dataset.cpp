#include "camlab/dataset.hpp"

#include "camlab/csv.hpp"
#include "camlab/error.hpp"
#include "camlab/random.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/core.h>

namespace camlab {
namespace fs = std::filesystem;
namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::uint32_t get_u32(std::string_view b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[at + static_cast<std::size_t>(i)]);
  return v;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

Split parse_split(std::string_view s, std::string_view where) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s.empty()) return Split::Unassigned;
  throw ParseError(fmt::format("{}: unknown split '{}'", where, s));
}

// Next whitespace-delimited PGM header token, skipping '#' comments.
std::string pgm_token(std::string_view bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
  std::size_t start = pos;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  return std::string(bytes.substr(start, pos - start));
}

template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[rng.below(i)]);
  }
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Unassigned: return "";
  }
  return "";
}

Split Manifest::split_of(const SliceRecord& s) const {
  auto it = split.find(s.patient_id);
  return it == split.end() ? Split::Unassigned : it->second;
}

fs::path Manifest::resolve(const fs::path& p) const { return p.is_absolute() ? p : root / p; }

std::vector<const SliceRecord*> Manifest::select(Split which) const {
  std::vector<const SliceRecord*> out;
  for (const auto& s : slices) {
    if (split_of(s) == which) out.push_back(&s);
  }
  return out;
}

Image<double> read_raw_image(const fs::path& path) {
  const std::string bytes = slurp(path);
  if (bytes.size() < 16 || bytes.compare(0, 4, "CAMI") != 0) {
    throw ParseError(fmt::format("'{}' is not a CAMI image", path.string()));
  }
  const std::uint32_t h = get_u32(bytes, 4);
  const std::uint32_t w = get_u32(bytes, 8);
  if (bytes.size() != 16 + std::size_t{h} * w * 4) {
    throw ParseError(fmt::format("'{}': payload size does not match {}x{}", path.string(), h, w));
  }
  Image<double> img(h, w);
  for (std::size_t i = 0; i < std::size_t{h} * w; ++i) {
    const float v = std::bit_cast<float>(get_u32(bytes, 16 + 4 * i));
    if (!std::isfinite(v)) throw ParseError(fmt::format("'{}': non-finite pixel {}", path.string(), i));
    img(static_cast<Eigen::Index>(i / w), static_cast<Eigen::Index>(i % w)) = v;
  }
  return img;
}

void write_raw_image(const fs::path& path, const Image<double>& hu) {
  std::string out = "CAMI";
  put_u32(out, static_cast<std::uint32_t>(hu.rows()));
  put_u32(out, static_cast<std::uint32_t>(hu.cols()));
  put_u32(out, 0);
  for (Eigen::Index r = 0; r < hu.rows(); ++r) {
    for (Eigen::Index c = 0; c < hu.cols(); ++c) {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(hu(r, c))));
    }
  }
  dump(path, out);
}

BinaryMask read_pgm_mask(const fs::path& path) {
  const std::string bytes = slurp(path);
  std::size_t pos = 0;
  if (pgm_token(bytes, pos) != "P5") throw ParseError(fmt::format("'{}' is not a P5 PGM", path.string()));
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(pgm_token(bytes, pos));
    h = std::stoul(pgm_token(bytes, pos));
    maxval = std::stoul(pgm_token(bytes, pos));
  } catch (const std::exception&) {
    throw ParseError(fmt::format("'{}': malformed PGM header", path.string()));
  }
  if (maxval != 255) throw ParseError(fmt::format("'{}': PGM maxval must be 255", path.string()));
  ++pos;  // single whitespace after maxval
  if (bytes.size() != pos + w * h) {
    throw ParseError(fmt::format("'{}': PGM payload size mismatch", path.string()));
  }
  BinaryMask mask(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  for (std::size_t i = 0; i < w * h; ++i) {
    mask(static_cast<Eigen::Index>(i / w), static_cast<Eigen::Index>(i % w)) = bytes[pos + i] != 0;
  }
  return mask;
}

void write_pgm_mask(const fs::path& path, const BinaryMask& mask) {
  std::string out = fmt::format("P5\n{} {}\n255\n", mask.cols(), mask.rows());
  for (Eigen::Index r = 0; r < mask.rows(); ++r) {
    for (Eigen::Index c = 0; c < mask.cols(); ++c) out.push_back(static_cast<char>(mask(r, c) ? 255 : 0));
  }
  dump(path, out);
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open manifest '{}'", path.string()));
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> slice_ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = fmt::format("{}:{}", path.string(), lineno);
    auto f = split_csv_line(line);
    if (lineno == 1 && !f.empty() && f[0] == "patient_id") continue;
    if (f.size() != 6) throw ParseError(fmt::format("{}: expected 6 fields", where));
    SliceRecord r;
    r.patient_id = f[0];
    r.slice_id = f[1];
    r.image_path = f[2];
    if (!f[3].empty()) r.mask_path = fs::path(f[3]);
    if (f[4] == "0") r.label = 0;
    else if (f[4] == "1") r.label = 1;
    else throw ParseError(fmt::format("{}: label must be 0 or 1", where));
    if (r.patient_id.empty() || r.slice_id.empty()) throw ParseError(fmt::format("{}: empty id", where));
    if (!slice_ids.insert(r.slice_id).second) {
      throw ParseError(fmt::format("{}: duplicate slice id '{}'", where, r.slice_id));
    }
    if (r.label == 1 && !r.mask_path) {
      throw ParseError(fmt::format("{}: positive slice without mask", where));
    }
    const Split s = parse_split(f[5], where);
    auto [it, inserted] = m.split.emplace(r.patient_id, s);
    if (!inserted && it->second != s) {
      throw DataError(fmt::format("{}: patient '{}' appears in more than one split", where, r.patient_id));
    }
    m.slices.push_back(std::move(r));
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& m) {
  std::string out = "patient_id,slice_id,image_path,mask_path,label,split\n";
  for (const auto& s : m.slices) {
    out += fmt::format("{},{},{},{},{},{}\n", s.patient_id, s.slice_id, s.image_path.generic_string(),
                       s.mask_path ? s.mask_path->generic_string() : std::string(), s.label,
                       to_string(m.split_of(s)));
  }
  dump(path, out);
}

LoadedSlice load_slice(const Manifest& manifest, const SliceRecord& record) {
  LoadedSlice out;
  out.image = window_hu(read_raw_image(manifest.resolve(record.image_path)));
  if (record.mask_path) {
    out.truth = read_pgm_mask(manifest.resolve(*record.mask_path));
    if (out.truth.rows() != out.image.rows() || out.truth.cols() != out.image.cols()) {
      throw DataError(fmt::format("slice '{}': mask and image sizes differ", record.slice_id));
    }
  } else {
    out.truth = BinaryMask::Constant(out.image.rows(), out.image.cols(), false);
  }
  if ((record.label == 1) != out.truth.any()) {
    throw DataError(fmt::format("slice '{}': label {} disagrees with its mask", record.slice_id, record.label));
  }
  return out;
}

Manifest patient_split(Manifest manifest, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ValidationError("test fraction must lie in (0, 1)");
  }
  std::map<std::string, bool> positive;
  for (const auto& s : manifest.slices) positive[s.patient_id] |= s.label == 1;
  std::vector<std::string> pos_ids, neg_ids;
  for (const auto& [id, pos] : positive) (pos ? pos_ids : neg_ids).push_back(id);

  const std::size_t total = positive.size();
  if (total < 2) throw DataError("patient split needs at least two patients");
  std::size_t n_test = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(total) - 1e-9));
  n_test = std::clamp<std::size_t>(n_test, 1, total - 1);
  std::size_t pos_test = static_cast<std::size_t>(
      std::llround(static_cast<double>(pos_ids.size() * n_test) / static_cast<double>(total)));
  pos_test = std::min(pos_test, pos_ids.size());
  std::size_t neg_test = std::min(n_test - pos_test, neg_ids.size());
  pos_test = std::min(n_test - neg_test, pos_ids.size());

  Rng rng(seed);
  shuffle(pos_ids, rng);
  shuffle(neg_ids, rng);
  manifest.split.clear();
  for (std::size_t i = 0; i < pos_ids.size(); ++i) manifest.split[pos_ids[i]] = i < pos_test ? Split::Test : Split::Train;
  for (std::size_t i = 0; i < neg_ids.size(); ++i) manifest.split[neg_ids[i]] = i < neg_test ? Split::Test : Split::Train;
  return manifest;
}

Manifest synth_dataset(const fs::path& dir, const SynthOptions& opt) {
  if (opt.patients < 2 || opt.slices_per_patient < 1) {
    throw ValidationError("synthetic dataset needs at least two patients and one slice each");
  }
  if (opt.height < 16 || opt.width < 16) throw ValidationError("synthetic images must be at least 16x16");
  Rng rng(opt.seed);
  std::vector<std::size_t> order(opt.patients);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, rng);
  const std::size_t positive_patients = (opt.patients + 1) / 2;
  std::vector<bool> is_positive(opt.patients, false);
  for (std::size_t i = 0; i < positive_patients; ++i) is_positive[order[i]] = true;
  const std::size_t run = std::max<std::size_t>(1, (opt.slices_per_patient + 1) / 2);

  const auto H = static_cast<Eigen::Index>(opt.height);
  const auto W = static_cast<Eigen::Index>(opt.width);
  const double hd = static_cast<double>(opt.height);
  const double wd = static_cast<double>(opt.width);

  Manifest m;
  m.root = dir;
  for (std::size_t p = 0; p < opt.patients; ++p) {
    const std::string pid = fmt::format("P{:03}", p);
    const double cy = hd / 2.0 + rng.uniform(-0.03, 0.03) * hd;
    const double cx = wd / 2.0 + rng.uniform(-0.03, 0.03) * wd;
    const double ry = hd * rng.uniform(0.38, 0.44);
    const double rx = wd * rng.uniform(0.32, 0.38);
    const std::size_t run_start = rng.below(opt.slices_per_patient - run + 1);

    for (std::size_t s = 0; s < opt.slices_per_patient; ++s) {
      const bool lesion = is_positive[p] && s >= run_start && s < run_start + run;
      Image<double> hu(H, W);
      for (Eigen::Index y = 0; y < H; ++y) {
        for (Eigen::Index x = 0; x < W; ++x) {
          const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
          const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
          hu(y, x) = dy * dy + dx * dx <= 1.0 ? 25.0 + rng.uniform(-4.0, 4.0) : -1000.0;
        }
      }
      SliceRecord rec;
      rec.patient_id = pid;
      rec.slice_id = fmt::format("{}_S{:03}", pid, s);
      rec.image_path = fs::path("images") / (rec.slice_id + ".cami");
      if (lesion) {
        // Gaussian blob well inside the brain ellipse; its mask is where it exceeds half its peak.
        const double angle = rng.uniform(0.0, 6.283185307179586);
        const double radius = std::sqrt(rng.uniform()) * 0.45;
        const double by = cy + radius * ry * std::sin(angle);
        const double bx = cx + radius * rx * std::cos(angle);
        const double sigma = rng.uniform(0.04, 0.08) * std::min(hd, wd);
        const double amplitude = rng.uniform(40.0, 55.0);
        const double cut = 0.5 * amplitude;
        BinaryMask mask = BinaryMask::Constant(H, W, false);
        for (Eigen::Index y = 0; y < H; ++y) {
          for (Eigen::Index x = 0; x < W; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - by;
            const double dx = static_cast<double>(x) + 0.5 - bx;
            const double blob = amplitude * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            hu(y, x) += blob;
            mask(y, x) = blob > cut;
          }
        }
        rec.mask_path = fs::path("masks") / (rec.slice_id + ".pgm");
        rec.label = 1;
        write_pgm_mask(dir / *rec.mask_path, mask);
      }
      write_raw_image(dir / rec.image_path, hu);
      m.slices.push_back(std::move(rec));
    }
  }
  m = patient_split(std::move(m), opt.test_fraction, opt.seed);
  write_manifest(dir / "manifest.csv", m);
  return m;
}

}  // namespace camlab
