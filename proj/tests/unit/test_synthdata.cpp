#include <doctest.h>

#include "dasgan/ck_pipeline.hpp"
#include "dasgan/error.hpp"
#include "dasgan/metrics.hpp"
#include "dasgan/synthdata.hpp"

using namespace dasgan;
using namespace dasgan::synth;

TEST_CASE("generation is seeded and reproducible") {
  SynthConfig c;
  const auto a1 = generate_a(c, 3), a2 = generate_a(c, 3);
  const auto b1 = generate_b(c, 3), b2 = generate_b(c, 3);
  REQUIRE(a1.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::equal(a1[i].image.pixels().begin(), a1[i].image.pixels().end(), a2[i].image.pixels().begin()));
    CHECK(a1[i].mask == a2[i].mask);
    CHECK(std::equal(b1[i].image.pixels().begin(), b1[i].image.pixels().end(), b2[i].image.pixels().begin()));
    CHECK(b1[i].mask == b2[i].mask);
  }
  c.seed = 8;
  const auto a3 = generate_a(c, 1);
  CHECK_FALSE(std::equal(a1[0].image.pixels().begin(), a1[0].image.pixels().end(), a3[0].image.pixels().begin()));
}

TEST_CASE("layout seeds never coincide across domains or streams") {
  SynthConfig c;
  CHECK(layout_seed(c, Domain::A, 0, 0) != layout_seed(c, Domain::B, 0, 0));
  CHECK(layout_seed(c, Domain::A, 1, 0) != layout_seed(c, Domain::A, 2, 0));
  CHECK(layout_seed(c, Domain::A, 1, 0) != layout_seed(c, Domain::A, 1, 1));
}

TEST_CASE("empty scene gives a blank patch and an empty mask") {
  SynthConfig c;
  c.min_blobs = c.max_blobs = 0;
  for (const auto& s : generate_b(c, 3)) CHECK(s.mask.count() == 0);
  c.distractor_density = 0.0;
  for (const auto& s : generate_a(c, 3)) CHECK(s.mask.count(label::kOther) == s.mask.labels().size());
}

TEST_CASE("noise-free B patches are recovered by the CK pipeline") {
  SynthConfig c;
  c.noise_sigma = 0.0;
  const auto m = ck::StainMatrix::hematoxylin_dab();
  for (const auto& s : generate_b(c, 10)) {
    if (s.mask.count() == 0) continue;
    CHECK(ck::intersection_over_union(ck::segment_ck(s.image, m), s.mask) >= 0.98);
  }
}

TEST_CASE("positive fraction boundaries") {
  SynthConfig c;
  c.positive_fraction = 0.0;
  for (const auto& s : generate_a(c, 8)) CHECK(s.mask.count(label::kTcPositive) == 0);
  c.positive_fraction = 1.0;
  c.min_blobs = 1;
  for (const auto& s : generate_a(c, 8)) {
    REQUIRE(s.mask.count(label::kTcPositive) > 0);
    CHECK(metrics::tc_score(s.mask) == 1.0);
  }
}

TEST_CASE("distractors are brown but labelled Other") {
  SynthConfig c;
  c.distractor_density = 0.01;
  c.noise_sigma = 0.0;
  const auto m = ck::StainMatrix::hematoxylin_dab();
  std::size_t brown_other = 0;
  for (const auto& s : generate_a(c, 6)) {
    const auto dab = ck::color_deconvolve(s.image, m).channel(ck::kDabChannel);
    for (std::size_t i = 0; i < dab.size(); ++i) brown_other += dab[i] > 0.5 && s.mask.labels()[i] == label::kOther;
  }
  CHECK(brown_other > 0);
}

TEST_CASE("split annotation fraction") {
  SynthConfig c;
  SplitSizes sizes;
  sizes.train_a = 10;
  sizes.train_b = 4;
  sizes.test = 2;
  sizes.validation = 2;
  sizes.annotation_fraction = 0.0;
  for (const auto& s : make_splits(c, sizes).train_a) CHECK(s.mask.count(label::kIgnore) == s.mask.labels().size());
  sizes.annotation_fraction = 1.0;
  const auto full = make_splits(c, sizes);
  for (const auto& s : full.train_a) CHECK(s.mask.count(label::kIgnore) == 0);

  sizes.annotation_fraction = 0.3;
  const auto part = make_splits(c, sizes);
  CHECK(labelled_count(10, 0.3) == 3);
  for (int i = 0; i < 10; ++i) {
    if (i < 3) CHECK(part.train_a[i].mask == full.train_a[i].mask);
    else CHECK(part.train_a[i].mask.count(label::kIgnore) == part.train_a[i].mask.labels().size());
  }
}

TEST_CASE("splits are deterministic and disjoint") {
  SynthConfig c;
  SplitSizes sizes;
  sizes.train_a = 4;
  sizes.train_b = 4;
  sizes.test = 2;
  sizes.validation = 2;
  const auto s1 = make_splits(c, sizes), s2 = make_splits(c, sizes);
  CHECK_NOTHROW(s1.validate());
  for (std::size_t i = 0; i < s1.train_b.size(); ++i) {
    CHECK(s1.train_b[i].mask == s2.train_b[i].mask);
    CHECK(s1.train_b[i].image.id() == s2.train_b[i].image.id());
  }
  for (std::size_t i = 0; i < s1.validation.size(); ++i) CHECK(s1.validation[i].mask == s2.validation[i].mask);
}

TEST_CASE("reference translation keeps the B layout") {
  SynthConfig c;
  c.distractor_density = 0.0;
  const auto b = generate_b(c, 3);
  for (int i = 0; i < 3; ++i) {
    const auto neg = reference_translation(c, 0, static_cast<std::uint64_t>(i), false);
    const auto pos = reference_translation(c, 0, static_cast<std::uint64_t>(i), true);
    CHECK(neg.mask == ck::condition_masks(b[i].mask, Domain::A).first);
    CHECK(pos.mask == ck::condition_masks(b[i].mask, Domain::A).second);
  }
}

TEST_CASE("invalid configs are rejected") {
  SynthConfig c;
  c.positive_fraction = 1.5;
  CHECK_THROWS_AS(c.validate(), Error);
  c = SynthConfig{};
  c.min_blobs = 3;
  c.max_blobs = 2;
  CHECK_THROWS_AS(c.validate(), Error);
}
