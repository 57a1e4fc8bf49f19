#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tokencd/data_model.hpp"

namespace tokencd {

// Parameters for the synthetic shape sources. Every family listed is drawn
// into the scene with the same event budget; `class_families` decides which
// families carry labels, so two sources with conflicting positives can share
// one scene stream by sharing the full family set and seed.
struct SyntheticSpec {
    int image_size = 64;
    std::vector<std::string> class_families{"square"};     // label class c uses class_families[c-1]
    std::vector<std::string> background_families{};        // rendered but labeled as background
    double change_rate = 0.15;                             // target changed fraction per family
    double noise_level = 0.02;
    std::uint64_t seed = 1;

    std::vector<std::string> validate() const;
    ClassVocabulary vocabulary() const { return ClassVocabulary::with_change_classes(class_families); }
};

std::vector<Sample> generate_bcd_source(const SyntheticSpec& spec, int count, const std::string& source_id);
std::vector<Sample> generate_scd_source(const SyntheticSpec& spec, int count, const std::string& source_id);

struct ManifestRecord {
    std::string img1, img2;
    std::string change_mask;             // empty for SCD records derived from the label pair
    std::optional<std::string> sem_t1, sem_t2;
};

struct DatasetManifest {
    int schema = 1;
    std::string source_id;
    TaskKind task = TaskKind::Bcd;
    ClassVocabulary vocabulary;
    std::uint64_t seed = 0;
    std::map<std::string, std::vector<ManifestRecord>> splits;
    std::string root;  // directory paths are resolved against

    const std::vector<ManifestRecord>& split(const std::string& name) const;
    int train_size() const;
};

// Manifest JSON (schema 1). Loading verifies that every referenced file
// exists and that every mask/label map is readable and within range.
void save_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

Sample load_sample(const DatasetManifest& manifest, const ManifestRecord& record);

// Writes samples under <root>/<split>/<idx>_{t1,t2,change,sem1,sem2}.png and
// returns the manifest (not yet saved).
DatasetManifest write_source(const std::vector<Sample>& samples, TaskKind task, const ClassVocabulary& vocabulary,
                             const std::string& root, const std::vector<double>& split_ratios, std::uint64_t seed);

// Tile grid arithmetic: full tiles per axis, edge remainders dropped.
std::pair<int, int> tile_grid(int h, int w, int tile);

// Tiles one large pair into tile x tile patches, writes them under out_root
// and splits them by the given ratios after a seeded shuffle.
DatasetManifest tile_pair(const Image& img1, const Image& img2, const BinaryMask& change,
                          const std::optional<LabelMap>& sem_t1, const std::optional<LabelMap>& sem_t2, int tile,
                          const std::vector<double>& split_ratios, const std::string& out_root,
                          const std::string& source_id, const ClassVocabulary& vocabulary, std::uint64_t seed);

// Batches drawn from one source at a time, interleaved proportionally to the
// per-source sizes; pure function of (sizes, batch_size, seed, epoch).
struct BatchRef {
    int source = 0;
    std::vector<int> indices;
};

class MixedSampler {
public:
    MixedSampler(std::vector<int> source_sizes, int batch_size, std::uint64_t seed);
    std::vector<BatchRef> plan_epoch(int epoch) const;
    int batches_per_epoch() const;

private:
    std::vector<int> sizes_;
    int batch_size_;
    std::uint64_t seed_;
};

// Directory-convention adapters; exercised by format tests.
// BCD layout: <root>/<split>/{A,B,label} (Image1/Image2 also accepted).
DatasetManifest ingest_bcd_folder(const std::string& root, const std::string& source_id,
                                  const ClassVocabulary& vocabulary);
// SCD layout: <root>/<split>/{im1,im2,label1,label2}; the binary change mask
// is derived from the label pair on load.
DatasetManifest ingest_scd_folder(const std::string& root, const std::string& source_id,
                                  const ClassVocabulary& vocabulary);

}  // namespace tokencd
