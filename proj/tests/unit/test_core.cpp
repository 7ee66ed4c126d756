#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "sfda/core/digest.hpp"
#include "sfda/core/rng.hpp"
#include "sfda/core/tensor.hpp"
#include "sfda/nn/checkpoint.hpp"

using namespace sfda;

TEST(Tensor, IndexingIsRowMajorNchw) {
  Tensor<float> t(2, 3, 4, 5);
  EXPECT_EQ(t.size(), 120u);
  EXPECT_EQ(t.index(1, 2, 3, 4), 119u);
  EXPECT_EQ(t.index(0, 1, 0, 0), 20u);
  t(1, 0, 2, 3) = 7.f;
  EXPECT_EQ(t[t.index(1, 0, 2, 3)], 7.f);
}

TEST(Tensor, SwapLeadingIsAnInvolution) {
  Tensor<double> t(2, 3, 2, 2);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  const auto s = swap_leading(t);
  EXPECT_EQ(s.dim(0), 3);
  EXPECT_EQ(s.dim(1), 2);
  EXPECT_EQ(s(2, 1, 1, 0), t(1, 2, 1, 0));
  EXPECT_EQ(swap_leading(s), t);
}

TEST(Tensor, OneHotMatchesLabels) {
  LabelBatch b(1, 2, 2);
  b.labels = {0, 1, 2, 1};
  const auto oh = one_hot<float>(b, 3);
  EXPECT_EQ(oh.shape(), (Tensor<float>::Shape{1, 3, 2, 2}));
  EXPECT_EQ(oh(0, 0, 0, 0), 1.f);
  EXPECT_EQ(oh(0, 1, 0, 1), 1.f);
  EXPECT_EQ(oh(0, 2, 1, 0), 1.f);
  EXPECT_EQ(oh(0, 1, 1, 1), 1.f);
  float total = 0;
  for (float v : oh.values()) total += v;
  EXPECT_EQ(total, 4.f);
}

TEST(Tensor, OneHotRejectsOutOfRangeLabel) {
  LabelBatch b(1, 1, 1);
  b.labels = {5};
  EXPECT_THROW(one_hot<float>(b, 3), ValidationError);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 10; ++i) {
    const double x = a.normal();
    EXPECT_EQ(x, b.normal());
    (void)c;
  }
  EXPECT_NE(Rng(42).uniform(), Rng(43).uniform());
}

TEST(Rng, NormalMomentsAreStandard) {
  Rng r(1);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Rng, ShuffleIsAPermutation) {
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  Rng r(3);
  shuffle(v.begin(), v.end(), r);
  EXPECT_EQ(std::set<int>(v.begin(), v.end()).size(), 100u);
  EXPECT_FALSE(std::is_sorted(v.begin(), v.end()));
}

TEST(Rng, DerivedSeedsDiffer) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t t = 0; t < 1000; ++t) seen.insert(derive_seed(7, t));
  EXPECT_EQ(seen.size(), 1000u);
}

TEST(Digest, KnownSha256Vectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Archive, RoundTripsEveryRecordTypeBitExactly) {
  nn::Archive a;
  a.put("f", std::vector<float>{1.5f, -0.f, 3.4028235e38f});
  a.put("d", std::vector<double>{0.1, 1e-300});
  a.put("i", std::vector<std::int64_t>{-1, 42});
  a.put("t", std::string("hello"));
  const auto path = std::filesystem::temp_directory_path() / "sfda_archive_test.ckpt";
  a.save(path);
  const auto b = nn::Archive::load(path);
  EXPECT_EQ(b.records(), a.records());
  EXPECT_EQ(b.text("t"), "hello");
  EXPECT_THROW(b.get<std::vector<double>>("f"), ValidationError);
  EXPECT_THROW(b.text("missing"), ValidationError);
  std::filesystem::remove(path);
}

TEST(Archive, RejectsForeignFiles) {
  const auto path = std::filesystem::temp_directory_path() / "sfda_not_a_ckpt.bin";
  {
    std::ofstream os(path);
    os << "definitely not a checkpoint";
  }
  EXPECT_THROW(nn::Archive::load(path), IoError);
  EXPECT_THROW(nn::Archive::load(path.string() + ".missing"), IoError);
  std::filesystem::remove(path);
}

TEST(Archive, NetworkRoundTripRestoresEveryTensor) {
  nn::NetworkSpec spec{{4, 8, 8, 8, 8, 8, 8, 8, 4}, 3, 1};
  nn::UNet<float> a(spec, 1), b(spec, 2);
  nn::Archive ar;
  nn::store_network(ar, "net", a);
  nn::restore_network(ar, "net", b);
  EXPECT_EQ(nn::parameter_digest(a, false), nn::parameter_digest(b, false));

  nn::UNet<float> other({{4, 8, 8, 8, 16, 8, 8, 8, 4}, 3, 1}, 1);
  EXPECT_THROW(nn::restore_network(ar, "net", other), ValidationError);
}
