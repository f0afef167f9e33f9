#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "tcagu/errors.hpp"
#include "tcagu/hsi.hpp"

using namespace tcagu;

namespace {

SynthSpec small_spec(std::uint64_t seed) {
  SynthSpec s;
  s.height = 12;
  s.width = 10;
  s.bands = 20;
  s.endmembers = 3;
  s.seed = seed;
  return s;
}

// f32 quantization makes the first write lossy; round-trips after that are exact.
HsiCube quantized(HsiCube cube) { return decode_container(encode_container(cube)); }

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("tcagu_test_" + name);
}

}  // namespace

TEST(Synthetic, AbundancesOnSimplex) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (double alpha : {0.1, 1.0, 5.0}) {
      SynthSpec s = small_spec(seed);
      s.dirichlet_alpha = alpha;
      const HsiCube c = generate_synthetic(s);
      const auto& m = *c.gt_abundances;
      const std::size_t n = c.pixels();
      for (std::size_t j = 0; j < n; ++j) {
        double sum = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
          EXPECT_GE(m[k * n + j], 0.0);
          sum += m[k * n + j];
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
      }
    }
  }
}

TEST(Synthetic, EndmembersArePeakNormalizedAndNonnegative) {
  const HsiCube c = generate_synthetic(small_spec(3));
  const auto& e = *c.gt_endmembers;
  EXPECT_EQ(e.rows(), 20);
  EXPECT_EQ(e.cols(), 3);
  EXPECT_GE(e.minCoeff(), 0.0);
  for (Eigen::Index k = 0; k < e.cols(); ++k) EXPECT_DOUBLE_EQ(e.col(k).maxCoeff(), 1.0);
}

TEST(Synthetic, SnrMatchesSpec) {
  for (double snr : {10.0, 20.0, 40.0, 80.0}) {
    SynthSpec s = small_spec(11);
    s.snr_db = snr;
    const HsiCube c = generate_synthetic(s);
    Eigen::MatrixXd clean = *c.gt_endmembers * c.abundance_matrix();
    std::vector<double> flat(c.data.size());
    // clean is L×N column-major; data is band-major.
    for (std::size_t b = 0; b < c.bands; ++b)
      for (std::size_t j = 0; j < c.pixels(); ++j)
        flat[b * c.pixels() + j] = clean(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(j));
    EXPECT_NEAR(empirical_snr_db(flat, c.data), snr, 0.5) << snr;
  }
}

TEST(Synthetic, PurePixelsExactlyP) {
  const HsiCube c = generate_synthetic(small_spec(4));
  const auto m = c.abundance_matrix();
  int pure = 0;
  for (Eigen::Index j = 0; j < m.cols(); ++j) pure += (m.col(j).maxCoeff() == 1.0);
  EXPECT_EQ(pure, 3);
}

TEST(Synthetic, HugeConcentrationGivesUniformAbundances) {
  SynthSpec s = small_spec(5);
  s.dirichlet_alpha = 1e6;
  s.purity_pixels = false;
  const auto m = generate_synthetic(s).abundance_matrix();
  EXPECT_LT((m.array() - 1.0 / 3.0).abs().maxCoeff(), 1e-2);
}

TEST(Synthetic, ReproducibleFromSeed) {
  const HsiCube a = generate_synthetic(small_spec(9));
  const HsiCube b = generate_synthetic(small_spec(9));
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(*a.gt_abundances, *b.gt_abundances);
  EXPECT_NE(a.data, generate_synthetic(small_spec(10)).data);
}

TEST(Synthetic, InvalidSpecs) {
  SynthSpec s = small_spec(0);
  s.bands = 3;
  EXPECT_THROW(generate_synthetic(s), SpecError);
  s = small_spec(0);
  s.endmembers = 1;
  EXPECT_THROW(generate_synthetic(s), SpecError);
  s = small_spec(0);
  s.snr_db = 81;
  EXPECT_THROW(generate_synthetic(s), SpecError);
}

TEST(Container, RoundTripIsBitExact) {
  const HsiCube c = quantized(generate_synthetic(small_spec(1)));
  const auto path = temp_file("roundtrip.hsic");
  write_container(c, path);
  const HsiCube r = read_container(path);
  EXPECT_EQ(r.bands, c.bands);
  EXPECT_EQ(r.height, c.height);
  EXPECT_EQ(r.width, c.width);
  EXPECT_EQ(r.data, c.data);
  EXPECT_EQ(*r.gt_endmembers, *c.gt_endmembers);
  EXPECT_EQ(*r.gt_abundances, *c.gt_abundances);
  EXPECT_EQ(encode_container(r), encode_container(c));
  std::filesystem::remove(path);
}

TEST(Container, NoGroundTruthUsesPZero) {
  HsiCube c;
  c.bands = 2;
  c.height = 1;
  c.width = 2;
  c.data = {0.5, 0.25, 1.0, 0.125};
  const auto bytes = encode_container(c);
  EXPECT_EQ(bytes.size(), 28u + 16u);
  const HsiCube r = decode_container(bytes);
  EXPECT_EQ(r.data, c.data);
  EXPECT_FALSE(r.gt_endmembers);
  EXPECT_EQ(r.endmembers(), 0u);
}

TEST(Container, HeaderLayout) {
  HsiCube c = quantized(generate_synthetic(small_spec(2)));
  const auto bytes = encode_container(c);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "HSIC");
  auto u32 = [&](std::size_t at) {
    return bytes[at] | (bytes[at + 1] << 8) | (bytes[at + 2] << 16) | (bytes[at + 3] << 24);
  };
  EXPECT_EQ(u32(4), 1);   // version
  EXPECT_EQ(u32(8), 3);   // both ground truths
  EXPECT_EQ(u32(12), 20); // L
  EXPECT_EQ(u32(16), 12); // H
  EXPECT_EQ(u32(20), 10); // W
  EXPECT_EQ(u32(24), 3);  // P
  EXPECT_EQ(bytes.size(), 28u + 4u * (20 * 120 + 20 * 3 + 3 * 120));
  // First endmember value follows the data block, column-major.
  float first;
  std::memcpy(&first, &bytes[28 + 4 * 20 * 120], 4);
  EXPECT_EQ(first, static_cast<float>((*c.gt_endmembers)(0, 0)));
  float second;
  std::memcpy(&second, &bytes[28 + 4 * 20 * 120 + 4], 4);
  EXPECT_EQ(second, static_cast<float>((*c.gt_endmembers)(1, 0)));
}

TEST(Container, BadMagicAtOffsetZero) {
  auto bytes = encode_container(quantized(generate_synthetic(small_spec(1))));
  bytes[0] = 'X';
  try {
    decode_container(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Container, TruncatedPayload) {
  auto bytes = encode_container(quantized(generate_synthetic(small_spec(1))));
  bytes.resize(28 + 100);
  try {
    decode_container(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 28u);
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(Container, ExtentOverflow) {
  auto bytes = encode_container(quantized(generate_synthetic(small_spec(1))));
  for (std::size_t at : {12, 16, 20}) {
    bytes[at] = bytes[at + 1] = bytes[at + 2] = bytes[at + 3] = 0xff;
  }
  EXPECT_THROW(decode_container(bytes), FormatError);
}

TEST(Layout, UnfoldFoldInverse) {
  ad::Tensor x({2, 3, 4}, std::vector<double>(24));
  for (std::size_t i = 0; i < 24; ++i) x.data[i] = static_cast<double>(i) * 0.5;
  const ad::Tensor m = unfold(x);
  EXPECT_EQ(m.shape, (ad::Shape{2, 12}));
  const ad::Tensor back = fold(m, 3, 4);
  EXPECT_EQ(back.shape, x.shape);
  EXPECT_EQ(back.data, x.data);
  EXPECT_THROW(fold(m, 5, 4), DimensionError);
}

TEST(Layout, RowMajorColumns) {
  // [[a,b],[c,d]] -> columns a, b, c, d
  const ad::Tensor m = unfold(ad::Tensor({1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(m.data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Layout, ColumnSumsArePixelSums) {
  const HsiCube c = generate_synthetic(small_spec(6));
  const ad::Tensor m = unfold(ad::Tensor({c.bands, c.height, c.width}, c.data));
  const std::size_t n = c.pixels();
  for (std::size_t r = 0; r < c.height; ++r) {
    for (std::size_t q = 0; q < c.width; ++q) {
      double direct = 0.0, via = 0.0;
      for (std::size_t b = 0; b < c.bands; ++b) {
        direct += c.data[(b * c.height + r) * c.width + q];
        via += m.data[b * n + r * c.width + q];
      }
      EXPECT_EQ(direct, via);
    }
  }
}
