#include "tcagu/hsi.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "tcagu/errors.hpp"

namespace tcagu {

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

std::size_t HsiCube::endmembers() const {
  if (gt_endmembers) return static_cast<std::size_t>(gt_endmembers->cols());
  if (gt_abundances && pixels() > 0) return gt_abundances->size() / pixels();
  return 0;
}

Eigen::MatrixXd HsiCube::matrix() const {
  // data is L×N row-major.
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      data.data(), static_cast<Eigen::Index>(bands), static_cast<Eigen::Index>(pixels()));
}

Eigen::MatrixXd HsiCube::abundance_matrix() const {
  if (!gt_abundances) throw ContractError("cube has no ground-truth abundances");
  const auto p = static_cast<Eigen::Index>(endmembers());
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      gt_abundances->data(), p, static_cast<Eigen::Index>(pixels()));
}

void HsiCube::validate() const {
  if (bands == 0 || height == 0 || width == 0) throw DimensionError("cube extents must be positive");
  if (data.size() != bands * pixels()) {
    throw DimensionError("cube data holds " + std::to_string(data.size()) + " values, expected " +
                         std::to_string(bands * pixels()));
  }
  if (gt_endmembers && static_cast<std::size_t>(gt_endmembers->rows()) != bands) {
    throw DimensionError("ground-truth endmembers have wrong band count");
  }
  if (gt_abundances) {
    const std::size_t p = endmembers();
    if (p == 0 || gt_abundances->size() != p * pixels()) {
      throw DimensionError("ground-truth abundances do not match P×H×W");
    }
    const std::size_t n = pixels();
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        const double a = (*gt_abundances)[k * n + j];
        if (a < 0.0) throw SpecError("negative ground-truth abundance at pixel " + std::to_string(j));
        s += a;
      }
      if (std::abs(s - 1.0) > 1e-6) {
        throw SpecError("ground-truth abundances at pixel " + std::to_string(j) + " sum to " +
                        std::to_string(s));
      }
    }
  }
}

// ---- synthetic scenes ------------------------------------------------------

namespace {

Eigen::MatrixXd gaussian_bump_endmembers(std::size_t bands, std::size_t p, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n_bumps(3, 5);
  std::uniform_real_distribution<double> center(0.0, static_cast<double>(bands - 1));
  std::uniform_real_distribution<double> width(static_cast<double>(bands) / 20.0,
                                               static_cast<double>(bands) / 5.0);
  std::uniform_real_distribution<double> amp(0.2, 1.0);
  Eigen::MatrixXd e = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(bands), static_cast<Eigen::Index>(p));
  for (std::size_t k = 0; k < p; ++k) {
    const int bumps = n_bumps(rng);
    for (int b = 0; b < bumps; ++b) {
      const double c = center(rng), w = width(rng), a = amp(rng);
      for (std::size_t l = 0; l < bands; ++l) {
        const double d = (static_cast<double>(l) - c) / w;
        e(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) += a * std::exp(-0.5 * d * d);
      }
    }
    e.col(static_cast<Eigen::Index>(k)) /= e.col(static_cast<Eigen::Index>(k)).maxCoeff();
  }
  return e;
}

}  // namespace

HsiCube generate_synthetic(const SynthSpec& spec) {
  if (spec.endmembers < 2) throw SpecError("synthetic scene needs P >= 2");
  if (spec.bands <= spec.endmembers) throw SpecError("synthetic scene needs L > P");
  if (spec.height == 0 || spec.width == 0) throw SpecError("synthetic scene needs positive extents");
  if (!(spec.snr_db >= 0.0 && spec.snr_db <= 80.0)) throw SpecError("snr_db must lie in [0, 80]");
  if (!(spec.dirichlet_alpha > 0.0)) throw SpecError("dirichlet_alpha must be positive");
  const std::size_t n = spec.height * spec.width, p = spec.endmembers, l = spec.bands;
  if (spec.purity_pixels && n < p) throw SpecError("fewer pixels than pure pixels requested");

  std::mt19937_64 rng(spec.seed);
  HsiCube cube;
  cube.bands = l;
  cube.height = spec.height;
  cube.width = spec.width;
  const Eigen::MatrixXd e = gaussian_bump_endmembers(l, p, rng);

  // Dirichlet draws, P×N.
  std::gamma_distribution<double> gamma(spec.dirichlet_alpha, 1.0);
  std::vector<double> raw(p * n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < p; ++k) {
      double g = gamma(rng);
      // Tiny shapes can underflow to zero; keep the draw strictly positive.
      g = std::max(g, std::numeric_limits<double>::min());
      raw[k * n + j] = g;
      s += g;
    }
    for (std::size_t k = 0; k < p; ++k) raw[k * n + j] /= s;
  }

  // One 3×3 box pass (clipped at the border), then back onto the simplex.
  std::vector<double> abund(p * n, 0.0);
  const auto h = static_cast<long long>(spec.height), w = static_cast<long long>(spec.width);
  for (std::size_t k = 0; k < p; ++k) {
    for (long long r = 0; r < h; ++r) {
      for (long long c = 0; c < w; ++c) {
        double s = 0.0;
        int count = 0;
        for (long long dr = -1; dr <= 1; ++dr) {
          for (long long dc = -1; dc <= 1; ++dc) {
            const long long rr = r + dr, cc = c + dc;
            if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
            s += raw[k * n + static_cast<std::size_t>(rr * w + cc)];
            ++count;
          }
        }
        abund[k * n + static_cast<std::size_t>(r * w + c)] = s / count;
      }
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < p; ++k) s += abund[k * n + j];
    for (std::size_t k = 0; k < p; ++k) abund[k * n + j] /= s;
  }

  if (spec.purity_pixels) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t k = 0; k < p; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, n - 1);
      std::swap(idx[k], idx[pick(rng)]);
      for (std::size_t q = 0; q < p; ++q) abund[q * n + idx[k]] = (q == k) ? 1.0 : 0.0;
    }
  }

  // Clean cube = E·M, stored band-major.
  std::vector<double> clean(l * n, 0.0);
  for (std::size_t b = 0; b < l; ++b) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        s += e(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k)) * abund[k * n + j];
      }
      clean[b * n + j] = s;
    }
  }

  double power = 0.0;
  for (double v : clean) power += v * v;
  power /= static_cast<double>(clean.size());
  const double sigma = std::sqrt(power / std::pow(10.0, spec.snr_db / 10.0));
  std::normal_distribution<double> noise(0.0, sigma);
  cube.data = clean;
  for (double& v : cube.data) v += noise(rng);

  cube.gt_endmembers = e;
  cube.gt_abundances = std::move(abund);
  return cube;
}

double empirical_snr_db(const std::vector<double>& clean, const std::vector<double>& noisy) {
  if (clean.size() != noisy.size() || clean.empty()) {
    throw DimensionError("empirical_snr_db: signal and observation sizes differ");
  }
  double sp = 0.0, np = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    sp += clean[i] * clean[i];
    const double d = noisy[i] - clean[i];
    np += d * d;
  }
  if (np == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(sp / np);
}

// ---- container -------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'H', 'S', 'I', 'C'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 4 * 6;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  put_u32(out, bits);
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw DimensionError(std::string(what) + " does not fit the container's u32 field");
  }
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  std::uint32_t u32() {
    need(4, "header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::vector<double> f32s(std::uint64_t count, const char* what) {
    if (count > (bytes_.size() - pos_) / 4) {
      throw FormatError(std::string("truncated payload: ") + what + " needs " +
                            std::to_string(count) + " f32 values",
                        pos_);
    }
    std::vector<double> out(count);
    for (std::uint64_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(u32());
    return out;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated ") + what, pos_);
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_container(const HsiCube& cube) {
  cube.validate();
  const std::size_t p = cube.endmembers();
  std::uint32_t flags = 0;
  if (cube.gt_endmembers) flags |= 1u;
  if (cube.gt_abundances) flags |= 2u;

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + 4 * (cube.data.size() + (cube.gt_abundances ? cube.gt_abundances->size() : 0) +
                                  cube.bands * p));
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, flags);
  put_u32(out, checked_u32(cube.bands, "L"));
  put_u32(out, checked_u32(cube.height, "H"));
  put_u32(out, checked_u32(cube.width, "W"));
  put_u32(out, checked_u32(p, "P"));
  for (double v : cube.data) put_f32(out, v);
  if (cube.gt_endmembers) {
    const Eigen::MatrixXd& e = *cube.gt_endmembers;
    for (Eigen::Index k = 0; k < e.cols(); ++k)
      for (Eigen::Index b = 0; b < e.rows(); ++b) put_f32(out, e(b, k));
  }
  if (cube.gt_abundances) {
    for (double v : *cube.gt_abundances) put_f32(out, v);
  }
  return out;
}

HsiCube decode_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("bad magic, expected \"HSIC\"", 0);
  }
  Reader in(bytes);
  in.u32();
  const std::size_t version_at = in.pos();
  if (in.u32() != kVersion) throw FormatError("unsupported container version", version_at);
  const std::size_t flags_at = in.pos();
  const std::uint32_t flags = in.u32();
  if (flags & ~3u) throw FormatError("unknown flag bits", flags_at);
  const std::size_t extents_at = in.pos();
  const std::uint64_t l = in.u32(), h = in.u32(), w = in.u32(), p = in.u32();
  if (l == 0 || h == 0 || w == 0) throw FormatError("zero extent in header", extents_at);
  if ((flags != 0) != (p != 0)) throw FormatError("endmember count inconsistent with flags", extents_at);

  // Products of three u32 can overflow u64; guard before multiplying.
  const std::uint64_t hw = h * w;
  if (l > std::numeric_limits<std::uint64_t>::max() / 4 / hw) {
    throw FormatError("extent overflow: L*H*W exceeds addressable size", extents_at);
  }

  HsiCube cube;
  cube.bands = l;
  cube.height = h;
  cube.width = w;
  cube.data = in.f32s(l * hw, "image data");
  if (flags & 1u) {
    if (l * p > in.remaining() / 4) throw FormatError("truncated payload: endmembers", in.pos());
    const auto vals = in.f32s(l * p, "endmembers");
    Eigen::MatrixXd e(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(p));
    for (std::uint64_t k = 0; k < p; ++k)
      for (std::uint64_t b = 0; b < l; ++b)
        e(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k)) = vals[k * l + b];
    cube.gt_endmembers = std::move(e);
  }
  if (flags & 2u) {
    if (p > in.remaining() / 4 / hw) throw FormatError("truncated payload: abundances", in.pos());
    cube.gt_abundances = in.f32s(p * hw, "abundances");
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after payload", in.pos());
  return cube;
}

void write_container(const HsiCube& cube, const std::filesystem::path& path) {
  const auto bytes = encode_container(cube);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

HsiCube read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

// ---- layout ----------------------------------------------------------------

ad::Tensor unfold(const ad::Tensor& map) {
  if (map.shape.size() != 3) throw DimensionError("unfold expects C×H×W, got " + ad::shape_str(map.shape));
  return ad::Tensor({map.shape[0], map.shape[1] * map.shape[2]}, map.data);
}

ad::Tensor fold(const ad::Tensor& matrix, std::size_t height, std::size_t width) {
  if (matrix.shape.size() != 2 || matrix.shape[1] != height * width) {
    throw DimensionError("fold: " + ad::shape_str(matrix.shape) + " cannot be folded to " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  return ad::Tensor({matrix.shape[0], height, width}, matrix.data);
}

}  // namespace tcagu
