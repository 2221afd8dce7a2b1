#pragma once

// Frozen reference values. Readability rows come from
// tests/oracles/readability_oracle.py over tests/data/readability_fixture.txt;
// SARI values from tests/oracles/sari_oracle.py over tests/data/sari_fixture.tsv.

#include <array>
#include <filesystem>
#include <string>

#ifndef TWINLAB_TEST_DATA_DIR
#error "TWINLAB_TEST_DATA_DIR must be defined"
#endif

namespace twinlab::testkit {

inline std::filesystem::path data_path(const std::string& name) {
  return std::filesystem::path(TWINLAB_TEST_DATA_DIR) / name;
}

struct ReadabilityRow {
  const char* sentence;
  int words;
  int syllables;
  double fre;
  double fgl;
};

inline constexpr std::array<ReadabilityRow, 10> kReadabilityRows{{
    {"The cat sat on the mat.", 6, 6, 116.145, -1.45},
    {"Simplification makes reading easier.", 4, 11, -29.875, 18.42},
    {"The table was made of old oak.", 7, 8, 103.044285714286, 0.625714285714},
    {"Comprehensive examinations are administered annually.", 5, 18, -102.8, 28.84},
    {"I like apples and pears.", 5, 6, 100.24, 0.52},
    {"The committee unanimously approved the proposal.", 6, 15, -10.755, 16.25},
    {"Don't touch the little candle!", 6, 8, 87.945, 2.483333333333},
    {"Yesterday the weather was extraordinarily unpredictable.", 6, 18, -53.055, 22.15},
    {"A big dog ate the bone.", 6, 6, 116.145, -1.45},
    {"Rhythm and style matter in simple prose.", 7, 9, 90.958571428571, 2.311428571429},
}};

// The ten fixture sentences taken together as one document.
inline constexpr double kFixtureDocumentFre = 47.792827586207;
inline constexpr double kFixtureDocumentFgl = 8.034068965517;

// tests/data/mini_corpus.txt as one document.
inline constexpr double kMiniCorpusFre = -19.532367748531;
inline constexpr double kMiniCorpusFgl = 18.086670074112;
inline constexpr double kMiniCorpusMeanFre = 14.973229909625;
inline constexpr double kMiniCorpusMeanFgl = 13.273832575693;

inline constexpr std::array<double, 5> kSariSentence{
    0.41666666666666669, 0.33333333333333331, 0.54864550654024347, 0.59648692810457515, 0.43268568433662774};
inline constexpr double kSariMean = 0.46556362379628924;

}  // namespace twinlab::testkit
