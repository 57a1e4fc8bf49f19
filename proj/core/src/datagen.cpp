#include "tokencd/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tokencd/png_io.hpp"

namespace fs = std::filesystem;

namespace tokencd {

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

namespace {

struct Rgb {
    double r, g, b;
};

Rgb family_color(const std::string& family) {
    if (family == "square") return {0.85, 0.30, 0.30};
    if (family == "circle") return {0.25, 0.45, 0.85};
    if (family == "triangle") return {0.30, 0.80, 0.40};
    std::uint64_t h = 1469598103934665603ull;
    for (char c : family) h = (h ^ static_cast<std::uint64_t>(c)) * 1099511628211ull;
    return {0.3 + 0.6 * ((h >> 8) % 97) / 96.0, 0.3 + 0.6 * ((h >> 16) % 89) / 88.0, 0.3 + 0.6 * ((h >> 24) % 83) / 82.0};
}

// One placed object slot. Either temporal side may hold a shape family;
// appear = (none, f), disappear = (f, none), static clutter = (f, f),
// class transition = (f, g).
struct ShapeEvent {
    std::string family_t1, family_t2;
    int cx = 0, cy = 0, half = 0;

    bool is_static() const { return family_t1 == family_t2; }
};

// Half-open extents: squares cover [c-half, c+half) on both axes, so a
// grid-snapped center and half give edges on exact 4-pixel boundaries, which
// the stride-4 mask head can represent without sub-cell decoding. Circles use
// the inscribed disc; triangles point up inside the same box.
bool inside_shape(const std::string& family, int cx, int cy, int half, int x, int y) {
    if (family.empty()) return false;
    if (family == "circle") {
        const double dx = x - cx + 0.5, dy = y - cy + 0.5;
        return dx * dx + dy * dy <= static_cast<double>(half) * half;
    }
    if (family == "triangle") {
        if (y < cy - half || y >= cy + half) return false;
        const double frac = static_cast<double>(y - (cy - half) + 1) / (2.0 * half);
        return std::abs(x - cx + 0.5) <= frac * half;
    }
    return x >= cx - half && x < cx + half && y >= cy - half && y < cy + half;  // square
}

double shape_area(const std::string& family, int half) {
    const double s = half;
    if (family == "circle") return 3.14159265358979 * s * s;
    if (family == "triangle") return 2.0 * s * s;
    return 4.0 * s * s;
}

void paint_shape(Image& img, const std::string& family, const ShapeEvent& ev) {
    if (family.empty()) return;
    const Rgb color = family_color(family);
    for (int y = ev.cy - ev.half; y <= ev.cy + ev.half; ++y)
        for (int x = ev.cx - ev.half; x <= ev.cx + ev.half; ++x) {
            if (y < 0 || y >= img.h || x < 0 || x >= img.w) continue;
            if (!inside_shape(family, ev.cx, ev.cy, ev.half, x, y)) continue;
            img.at(y, x, 0) = color.r;
            img.at(y, x, 1) = color.g;
            img.at(y, x, 2) = color.b;
        }
}

void mark_shape(BinaryMask& mask, const std::string& family, const ShapeEvent& ev) {
    for (int y = ev.cy - ev.half; y <= ev.cy + ev.half; ++y)
        for (int x = ev.cx - ev.half; x <= ev.cx + ev.half; ++x) {
            if (y < 0 || y >= mask.h || x < 0 || x >= mask.w) continue;
            if (!inside_shape(family, ev.cx, ev.cy, ev.half, x, y)) continue;
            mask.at(y, x) = 1;
        }
}

void mark_bbox(BinaryMask& mask, const ShapeEvent& ev, int margin) {
    for (int y = ev.cy - ev.half - margin; y <= ev.cy + ev.half + margin; ++y)
        for (int x = ev.cx - ev.half - margin; x <= ev.cx + ev.half + margin; ++x) {
            if (y < 0 || y >= mask.h || x < 0 || x >= mask.w) continue;
            mask.at(y, x) = 1;
        }
}

bool slot_free(const BinaryMask& occupied, const ShapeEvent& ev) {
    if (ev.cy - ev.half < 0 || ev.cy + ev.half >= occupied.h || ev.cx - ev.half < 0 || ev.cx + ev.half >= occupied.w)
        return false;
    for (int y = ev.cy - ev.half; y <= ev.cy + ev.half; ++y)
        for (int x = ev.cx - ev.half; x <= ev.cx + ev.half; ++x)
            if (occupied.at(y, x)) return false;
    return true;
}

Image textured_background(int size, double base, double noise, std::mt19937_64& rng) {
    Image img(size, size, 3);
    std::uniform_real_distribution<double> jitter(-noise, noise);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double shade = base + 0.06 * std::sin(0.21 * x) * std::cos(0.17 * y);
            for (int c = 0; c < 3; ++c) {
                double v = shade + jitter(rng);
                img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
            }
        }
    return img;
}

struct Scene {
    std::vector<ShapeEvent> events;
    Image img1, img2;
};

std::uint64_t sample_seed(std::uint64_t base, int index) { return base + static_cast<std::uint64_t>(index); }

// Places change events for one family until the changed area reaches the
// target, then one static clutter object. `transition_to` optionally supplies
// a different t2 family for class-to-class transitions.
template <typename TransitionFn>
std::vector<ShapeEvent> place_family_events(const std::string& family, double target_area, BinaryMask& occupied,
                                            std::mt19937_64& rng, int image_size, TransitionFn&& transition_to) {
    std::vector<ShapeEvent> events;
    // Large, grid-snapped shapes: centers and halves land on 4-pixel
    // multiples so mask boundaries stay representable at stride 4, and every
    // shape spans whole stride-16 feature cells.
    const int min_half = std::max(8, 4 * (image_size / 32));
    const int max_half = std::max(min_half + 4, 4 * (image_size / 16));
    std::uniform_int_distribution<int> coord(0, image_size / 4 - 1);
    std::uniform_int_distribution<int> halves(min_half / 4, max_half / 4);
    std::uniform_int_distribution<int> kind(0, 2);

    double placed = 0.0;
    int attempts = 0;
    while (placed < target_area && attempts < 200) {
        ShapeEvent ev;
        ev.half = 4 * halves(rng);
        // Aim the last shape at the remaining area so the realized change
        // fraction stays near the target.
        const double remaining = target_area - placed;
        while (ev.half - 4 >= min_half && shape_area(family, ev.half) > 1.35 * remaining) ev.half -= 4;
        ev.cx = 4 * coord(rng);
        ev.cy = 4 * coord(rng);
        switch (kind(rng)) {
            case 0: ev.family_t2 = family; break;                                      // appear
            case 1: ev.family_t1 = family; break;                                      // disappear
            default: ev.family_t1 = family; ev.family_t2 = transition_to(rng); break;  // transition
        }
        if (ev.family_t2 == ev.family_t1) ev.family_t2.clear();  // no same-class replacement events
        ++attempts;
        if (!slot_free(occupied, ev)) continue;
        mark_bbox(occupied, ev, 2);
        placed += shape_area(family, ev.half);
        events.push_back(ev);
    }
    for (int tries = 0; tries < 60; ++tries) {
        ShapeEvent ev;
        ev.half = 4 * halves(rng);
        ev.cx = 4 * coord(rng);
        ev.cy = 4 * coord(rng);
        ev.family_t1 = ev.family_t2 = family;  // static clutter
        if (!slot_free(occupied, ev)) continue;
        mark_bbox(occupied, ev, 2);
        events.push_back(ev);
        break;
    }
    return events;
}

// Families are iterated in canonical sorted order with an equal event budget,
// so the scene stream does not depend on which family a source labels
// positive. `allow_transitions` draws class-to-class events among the given
// transition classes (SCD); BCD scenes stick to appear/disappear.
Scene synthesize_scene(const SyntheticSpec& spec, int index, const std::vector<std::string>& all_families,
                       const std::vector<std::string>& transition_classes) {
    std::mt19937_64 rng(sample_seed(spec.seed, index));
    const int size = spec.image_size;
    std::uniform_real_distribution<double> base_dist(0.38, 0.52);
    const double base = base_dist(rng);

    Scene scene;
    scene.img1 = textured_background(size, base, spec.noise_level, rng);
    scene.img2 = textured_background(size, base, spec.noise_level, rng);

    std::vector<std::string> families = all_families;
    std::sort(families.begin(), families.end());
    families.erase(std::unique(families.begin(), families.end()), families.end());

    BinaryMask occupied(size, size);
    const double target_area = spec.change_rate * size * size;
    for (const auto& family : families) {
        auto transition_to = [&](std::mt19937_64& r) -> std::string {
            if (transition_classes.size() < 2) return family;  // degrades to disappear
            std::uniform_int_distribution<int> pick(0, static_cast<int>(transition_classes.size()) - 1);
            return transition_classes[static_cast<std::size_t>(pick(r))];
        };
        auto events = place_family_events(family, target_area, occupied, rng, size, transition_to);
        scene.events.insert(scene.events.end(), events.begin(), events.end());
    }
    for (const auto& ev : scene.events) {
        paint_shape(scene.img1, ev.family_t1, ev);
        paint_shape(scene.img2, ev.family_t2, ev);
    }
    return scene;
}

}  // namespace

std::vector<std::string> SyntheticSpec::validate() const {
    std::vector<std::string> v;
    if (image_size <= 0 || image_size % 32 != 0) v.push_back("image size must be a positive multiple of 32");
    if (change_rate <= 0.0 || change_rate >= 1.0) v.push_back("change rate must lie in (0,1)");
    if (class_families.empty()) v.push_back("at least one class family required");
    std::set<std::string> names(class_families.begin(), class_families.end());
    if (names.size() != class_families.size()) v.push_back("class families must be unique");
    for (const auto& b : background_families)
        if (names.count(b)) v.push_back("family cannot be both class and background: " + b);
    return v;
}

std::vector<Sample> generate_bcd_source(const SyntheticSpec& spec, int count, const std::string& source_id) {
    const auto violations = spec.validate();
    if (!violations.empty()) throw std::invalid_argument("generate_bcd_source: " + violations.front());
    if (spec.class_families.size() != 1)
        throw std::invalid_argument("generate_bcd_source: bcd sources label exactly one family");
    std::vector<std::string> all = spec.class_families;
    all.insert(all.end(), spec.background_families.begin(), spec.background_families.end());

    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Scene scene = synthesize_scene(spec, i, all, {});
        Sample s;
        s.pair.img1 = std::move(scene.img1);
        s.pair.img2 = std::move(scene.img2);
        s.gt.change_mask = BinaryMask(spec.image_size, spec.image_size);
        const std::string& positive = spec.class_families[0];
        for (const auto& ev : scene.events) {
            if (ev.is_static()) continue;
            if (ev.family_t1 == positive) mark_shape(s.gt.change_mask, ev.family_t1, ev);
            if (ev.family_t2 == positive) mark_shape(s.gt.change_mask, ev.family_t2, ev);
        }
        s.source_id = source_id;
        s.vocabulary = spec.vocabulary();
        samples.push_back(std::move(s));
    }
    return samples;
}

std::vector<Sample> generate_scd_source(const SyntheticSpec& spec, int count, const std::string& source_id) {
    const auto violations = spec.validate();
    if (!violations.empty()) throw std::invalid_argument("generate_scd_source: " + violations.front());
    if (spec.class_families.size() < 2)
        throw std::invalid_argument("generate_scd_source: need at least two change classes");
    std::vector<std::string> all = spec.class_families;
    all.insert(all.end(), spec.background_families.begin(), spec.background_families.end());

    auto class_of = [&](const std::string& family) {
        for (std::size_t c = 0; c < spec.class_families.size(); ++c)
            if (spec.class_families[c] == family) return static_cast<int>(c) + 1;
        return 0;
    };

    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Scene scene = synthesize_scene(spec, i, all, spec.class_families);
        Sample s;
        s.pair.img1 = std::move(scene.img1);
        s.pair.img2 = std::move(scene.img2);
        const int size = spec.image_size;
        LabelMap sem1(size, size), sem2(size, size);
        auto paint_labels = [&](LabelMap& sem, const std::string& family, const ShapeEvent& ev) {
            const int cls = class_of(family);
            if (cls == 0) return;
            for (int y = ev.cy - ev.half; y <= ev.cy + ev.half; ++y)
                for (int x = ev.cx - ev.half; x <= ev.cx + ev.half; ++x) {
                    if (y < 0 || y >= size || x < 0 || x >= size) continue;
                    if (inside_shape(family, ev.cx, ev.cy, ev.half, x, y)) sem.at(y, x) = cls;
                }
        };
        for (const auto& ev : scene.events) {
            if (ev.is_static()) continue;  // unchanged clutter carries no labels
            paint_labels(sem1, ev.family_t1, ev);
            paint_labels(sem2, ev.family_t2, ev);
        }
        s.gt.change_mask = binarize_semantic_change(sem1, sem2);
        s.gt.sem_t1 = std::move(sem1);
        s.gt.sem_t2 = std::move(sem2);
        s.source_id = source_id;
        s.vocabulary = spec.vocabulary();
        samples.push_back(std::move(s));
    }
    return samples;
}

// ---------------------------------------------------------------------------
// manifests
// ---------------------------------------------------------------------------

const std::vector<ManifestRecord>& DatasetManifest::split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw std::invalid_argument("manifest has no split: " + name);
    return it->second;
}

int DatasetManifest::train_size() const {
    auto it = splits.find("train");
    return it == splits.end() ? 0 : static_cast<int>(it->second.size());
}

namespace {

nlohmann::json record_to_json(const ManifestRecord& r) {
    nlohmann::json j{{"img1", r.img1}, {"img2", r.img2}, {"change_mask", r.change_mask}};
    if (r.sem_t1) j["sem_t1"] = *r.sem_t1;
    if (r.sem_t2) j["sem_t2"] = *r.sem_t2;
    return j;
}

ManifestRecord record_from_json(const nlohmann::json& j) {
    ManifestRecord r;
    r.img1 = j.at("img1").get<std::string>();
    r.img2 = j.at("img2").get<std::string>();
    r.change_mask = j.value("change_mask", std::string());
    if (j.contains("sem_t1")) r.sem_t1 = j.at("sem_t1").get<std::string>();
    if (j.contains("sem_t2")) r.sem_t2 = j.at("sem_t2").get<std::string>();
    return r;
}

std::string resolve(const DatasetManifest& m, const std::string& rel) {
    if (rel.empty()) return rel;
    const fs::path p(rel);
    if (p.is_absolute() || m.root.empty()) return rel;
    return (fs::path(m.root) / p).string();
}

void verify_record(const DatasetManifest& m, const ManifestRecord& r) {
    std::vector<std::string> paths{r.img1, r.img2};
    if (!r.change_mask.empty()) paths.push_back(r.change_mask);
    if (r.sem_t1) paths.push_back(*r.sem_t1);
    if (r.sem_t2) paths.push_back(*r.sem_t2);
    for (const auto& p : paths) {
        const std::string full = resolve(m, p);
        if (!fs::exists(full)) throw std::runtime_error("manifest references missing file: " + full);
    }
    if (r.sem_t1.has_value() != r.sem_t2.has_value())
        throw std::runtime_error("manifest record must pair semantic maps: " + r.img1);
    if (r.change_mask.empty() && !r.sem_t1)
        throw std::runtime_error("manifest record needs a change mask or a semantic pair: " + r.img1);
    const int n = m.vocabulary.change_class_count();
    for (const auto& sem : {r.sem_t1, r.sem_t2}) {
        if (!sem) continue;
        const LabelMap labels = read_label_png(resolve(m, *sem));
        for (int v : labels.data)
            if (v < 0 || v > n)
                throw std::runtime_error("label value " + std::to_string(v) + " exceeds vocabulary size " +
                                         std::to_string(n) + ": " + *sem);
    }
}

}  // namespace

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    nlohmann::json j;
    j["schema"] = manifest.schema;
    j["source_id"] = manifest.source_id;
    j["task"] = to_string(manifest.task);
    j["vocabulary"] = manifest.vocabulary.names();
    j["seed"] = manifest.seed;
    nlohmann::json splits = nlohmann::json::object();
    for (const auto& [name, records] : manifest.splits) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : records) arr.push_back(record_to_json(r));
        splits[name] = std::move(arr);
    }
    j["splits"] = std::move(splits);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed manifest json: " + path + ": " + e.what());
    }
    DatasetManifest m;
    m.schema = j.at("schema").get<int>();
    if (m.schema != 1) throw std::runtime_error("unsupported manifest schema");
    m.source_id = j.at("source_id").get<std::string>();
    m.task = task_from_string(j.at("task").get<std::string>());
    m.vocabulary = ClassVocabulary(j.at("vocabulary").get<std::vector<std::string>>());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.root = fs::path(path).parent_path().string();
    for (const auto& [name, arr] : j.at("splits").items()) {
        std::vector<ManifestRecord> records;
        for (const auto& rj : arr) records.push_back(record_from_json(rj));
        m.splits[name] = std::move(records);
    }
    for (const auto& [name, records] : m.splits)
        for (const auto& r : records) verify_record(m, r);
    return m;
}

Sample load_sample(const DatasetManifest& manifest, const ManifestRecord& record) {
    Sample s;
    s.pair.img1 = read_rgb_png(resolve(manifest, record.img1));
    s.pair.img2 = read_rgb_png(resolve(manifest, record.img2));
    if (record.sem_t1 && record.sem_t2) {
        LabelMap s1 = read_label_png(resolve(manifest, *record.sem_t1));
        LabelMap s2 = read_label_png(resolve(manifest, *record.sem_t2));
        const int n = manifest.vocabulary.change_class_count();
        for (const LabelMap* m : {&s1, &s2})
            for (int v : m->data)
                if (v < 0 || v > n) throw std::runtime_error("label value exceeds vocabulary size");
        s.gt.change_mask =
            record.change_mask.empty() ? binarize_semantic_change(s1, s2) : read_mask_png(resolve(manifest, record.change_mask));
        s.gt.sem_t1 = std::move(s1);
        s.gt.sem_t2 = std::move(s2);
    } else {
        s.gt.change_mask = read_mask_png(resolve(manifest, record.change_mask));
    }
    s.source_id = manifest.source_id;
    s.vocabulary = manifest.vocabulary;
    return s;
}

namespace {

std::vector<int> split_counts(int total, const std::vector<double>& ratios) {
    if (ratios.empty()) throw std::invalid_argument("split ratios must be non-empty");
    double sum = 0.0;
    for (double r : ratios) {
        if (r < 0.0) throw std::invalid_argument("split ratios must be nonnegative");
        sum += r;
    }
    if (sum <= 0.0) throw std::invalid_argument("split ratios must sum to a positive value");
    std::vector<int> counts(ratios.size(), 0);
    int assigned = 0;
    for (std::size_t i = 0; i + 1 < ratios.size(); ++i) {
        counts[i] = static_cast<int>(std::floor(total * ratios[i] / sum));
        assigned += counts[i];
    }
    counts.back() = total - assigned;
    return counts;
}

const std::vector<std::string> kSplitNames{"train", "val", "test"};

}  // namespace

DatasetManifest write_source(const std::vector<Sample>& samples, TaskKind task, const ClassVocabulary& vocabulary,
                             const std::string& root, const std::vector<double>& split_ratios, std::uint64_t seed) {
    if (split_ratios.size() > kSplitNames.size()) throw std::invalid_argument("at most three splits supported");
    DatasetManifest m;
    m.task = task;
    m.vocabulary = vocabulary;
    m.seed = seed;
    m.root = root;
    if (!samples.empty()) m.source_id = samples.front().source_id;

    std::vector<int> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const std::vector<int> counts = split_counts(static_cast<int>(samples.size()), split_ratios);

    int cursor = 0;
    for (std::size_t si = 0; si < counts.size(); ++si) {
        const std::string& split_name = kSplitNames[si];
        fs::create_directories(fs::path(root) / split_name);
        std::vector<ManifestRecord> records;
        for (int k = 0; k < counts[si]; ++k, ++cursor) {
            const Sample& s = samples[static_cast<std::size_t>(order[static_cast<std::size_t>(cursor)])];
            const std::string stem = split_name + "/" + std::to_string(k);
            ManifestRecord r;
            r.img1 = stem + "_t1.png";
            r.img2 = stem + "_t2.png";
            r.change_mask = stem + "_change.png";
            write_rgb_png(s.pair.img1, (fs::path(root) / r.img1).string());
            write_rgb_png(s.pair.img2, (fs::path(root) / r.img2).string());
            write_mask_png(s.gt.change_mask, (fs::path(root) / r.change_mask).string());
            if (s.gt.is_scd()) {
                r.sem_t1 = stem + "_sem1.png";
                r.sem_t2 = stem + "_sem2.png";
                write_label_png(*s.gt.sem_t1, (fs::path(root) / *r.sem_t1).string());
                write_label_png(*s.gt.sem_t2, (fs::path(root) / *r.sem_t2).string());
            }
            records.push_back(std::move(r));
        }
        m.splits[split_name] = std::move(records);
    }
    return m;
}

std::pair<int, int> tile_grid(int h, int w, int tile) {
    if (tile <= 0) throw std::invalid_argument("tile size must be positive");
    if (tile > h || tile > w) throw std::invalid_argument("tile larger than image");
    return {h / tile, w / tile};
}

DatasetManifest tile_pair(const Image& img1, const Image& img2, const BinaryMask& change,
                          const std::optional<LabelMap>& sem_t1, const std::optional<LabelMap>& sem_t2, int tile,
                          const std::vector<double>& split_ratios, const std::string& out_root,
                          const std::string& source_id, const ClassVocabulary& vocabulary, std::uint64_t seed) {
    if (img1.h != img2.h || img1.w != img2.w) throw std::invalid_argument("tile_pair: image shape mismatch");
    const auto [ty, tx] = tile_grid(img1.h, img1.w, tile);
    std::vector<Sample> tiles;
    tiles.reserve(static_cast<std::size_t>(ty) * tx);
    for (int gy = 0; gy < ty; ++gy)
        for (int gx = 0; gx < tx; ++gx) {
            Sample s;
            s.source_id = source_id;
            s.vocabulary = vocabulary;
            s.pair.img1 = Image(tile, tile, img1.c);
            s.pair.img2 = Image(tile, tile, img2.c);
            s.gt.change_mask = BinaryMask(tile, tile);
            if (sem_t1) s.gt.sem_t1 = LabelMap(tile, tile);
            if (sem_t2) s.gt.sem_t2 = LabelMap(tile, tile);
            for (int y = 0; y < tile; ++y)
                for (int x = 0; x < tile; ++x) {
                    const int sy = gy * tile + y, sx = gx * tile + x;
                    for (int c = 0; c < img1.c; ++c) {
                        s.pair.img1.at(y, x, c) = img1.at(sy, sx, c);
                        s.pair.img2.at(y, x, c) = img2.at(sy, sx, c);
                    }
                    s.gt.change_mask.at(y, x) = change.at(sy, sx);
                    if (sem_t1) s.gt.sem_t1->at(y, x) = sem_t1->at(sy, sx);
                    if (sem_t2) s.gt.sem_t2->at(y, x) = sem_t2->at(sy, sx);
                }
            tiles.push_back(std::move(s));
        }
    const TaskKind task = sem_t1 && sem_t2 ? TaskKind::Scd : TaskKind::Bcd;
    DatasetManifest m = write_source(tiles, task, vocabulary, out_root, split_ratios, seed);
    m.source_id = source_id;
    return m;
}

// ---------------------------------------------------------------------------
// sampler
// ---------------------------------------------------------------------------

MixedSampler::MixedSampler(std::vector<int> source_sizes, int batch_size, std::uint64_t seed)
    : sizes_(std::move(source_sizes)), batch_size_(batch_size), seed_(seed) {
    if (sizes_.empty()) throw std::invalid_argument("MixedSampler: need at least one source");
    for (int s : sizes_)
        if (s <= 0) throw std::invalid_argument("MixedSampler: empty source");
    if (batch_size_ <= 0) throw std::invalid_argument("MixedSampler: batch size must be positive");
}

int MixedSampler::batches_per_epoch() const {
    int total = 0;
    for (int s : sizes_) total += (s + batch_size_ - 1) / batch_size_;
    return total;
}

std::vector<BatchRef> MixedSampler::plan_epoch(int epoch) const {
    std::mt19937_64 rng(seed_ * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(epoch) + 1);
    std::vector<BatchRef> pool;
    for (std::size_t src = 0; src < sizes_.size(); ++src) {
        std::vector<int> order(static_cast<std::size_t>(sizes_[src]));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size_)) {
            BatchRef b;
            b.source = static_cast<int>(src);
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size_));
            b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
            pool.push_back(std::move(b));
        }
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    return pool;
}

// ---------------------------------------------------------------------------
// folder adapters
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> sorted_pngs(const fs::path& dir) {
    std::vector<std::string> names;
    if (!fs::is_directory(dir)) return names;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".png") names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

std::optional<fs::path> pick_dir(const std::vector<fs::path>& candidates) {
    for (const auto& c : candidates)
        if (fs::is_directory(c)) return c;
    return std::nullopt;
}

}  // namespace

DatasetManifest ingest_bcd_folder(const std::string& root, const std::string& source_id,
                                  const ClassVocabulary& vocabulary) {
    DatasetManifest m;
    m.task = TaskKind::Bcd;
    m.vocabulary = vocabulary;
    m.source_id = source_id;
    m.root = root;
    bool any = false;
    for (const auto& split_name : kSplitNames) {
        const fs::path split_dir = fs::path(root) / split_name;
        if (!fs::is_directory(split_dir)) continue;
        const auto a = pick_dir({split_dir / "A", split_dir / "Image1", split_dir / "im1"});
        const auto b = pick_dir({split_dir / "B", split_dir / "Image2", split_dir / "im2"});
        const auto lbl = pick_dir({split_dir / "label", split_dir / "OUT", split_dir / "gt"});
        if (!a || !b || !lbl) throw std::runtime_error("bcd folder missing A/B/label under " + split_dir.string());
        std::vector<ManifestRecord> records;
        for (const auto& name : sorted_pngs(*a)) {
            ManifestRecord r;
            r.img1 = (fs::path(split_name) / a->filename() / name).string();
            r.img2 = (fs::path(split_name) / b->filename() / name).string();
            r.change_mask = (fs::path(split_name) / lbl->filename() / name).string();
            records.push_back(std::move(r));
        }
        m.splits[split_name] = std::move(records);
        any = true;
    }
    if (!any) throw std::runtime_error("no train/val/test splits under " + root);
    for (const auto& [name, records] : m.splits)
        for (const auto& r : records) verify_record(m, r);
    return m;
}

DatasetManifest ingest_scd_folder(const std::string& root, const std::string& source_id,
                                  const ClassVocabulary& vocabulary) {
    DatasetManifest m;
    m.task = TaskKind::Scd;
    m.vocabulary = vocabulary;
    m.source_id = source_id;
    m.root = root;
    bool any = false;
    for (const auto& split_name : kSplitNames) {
        const fs::path split_dir = fs::path(root) / split_name;
        if (!fs::is_directory(split_dir)) continue;
        const auto a = pick_dir({split_dir / "im1", split_dir / "A"});
        const auto b = pick_dir({split_dir / "im2", split_dir / "B"});
        const auto l1 = pick_dir({split_dir / "label1", split_dir / "labelA"});
        const auto l2 = pick_dir({split_dir / "label2", split_dir / "labelB"});
        if (!a || !b || !l1 || !l2)
            throw std::runtime_error("scd folder missing im1/im2/label1/label2 under " + split_dir.string());
        std::vector<ManifestRecord> records;
        for (const auto& name : sorted_pngs(*a)) {
            ManifestRecord r;
            r.img1 = (fs::path(split_name) / a->filename() / name).string();
            r.img2 = (fs::path(split_name) / b->filename() / name).string();
            r.sem_t1 = (fs::path(split_name) / l1->filename() / name).string();
            r.sem_t2 = (fs::path(split_name) / l2->filename() / name).string();
            records.push_back(std::move(r));
        }
        m.splits[split_name] = std::move(records);
        any = true;
    }
    if (!any) throw std::runtime_error("no train/val/test splits under " + root);
    for (const auto& [name, records] : m.splits)
        for (const auto& r : records) verify_record(m, r);
    return m;
}

}  // namespace tokencd
