#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tokencd/tensor.hpp"

namespace tokencd {

enum class TaskKind { Bcd, Scd };

std::string to_string(TaskKind task);
TaskKind task_from_string(const std::string& s);

// Pixel values are reals in [0, 1], H x W x C row-major. Integer images are
// normalized on ingestion.
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, int c) : h(h), w(w), c(c), data(static_cast<std::size_t>(h) * w * c, 0.0) {}
    double& at(int y, int x, int ch) { return data[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const { return data[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
};

struct BinaryMask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> data;

    BinaryMask() = default;
    BinaryMask(int h, int w) : h(h), w(w), data(static_cast<std::size_t>(h) * w, 0) {}
    std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }
};

// Integer class labels; 0 is the no-change/background class.
struct LabelMap {
    int h = 0, w = 0;
    std::vector<int> data;

    LabelMap() = default;
    LabelMap(int h, int w) : h(h), w(w), data(static_cast<std::size_t>(h) * w, 0) {}
    int& at(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
    int at(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }
};

struct ImagePair {
    Image img1;
    Image img2;

    int height() const { return img1.h; }
    int width() const { return img1.w; }
    int channels() const { return img1.c; }
};

// Ordered class names; index 0 is reserved for the "nochange" background
// class, so size() == N + 1 where N counts the change classes.
class ClassVocabulary {
public:
    ClassVocabulary() = default;
    explicit ClassVocabulary(std::vector<std::string> names) : names_(std::move(names)) {}

    // Convenience: background plus the given change classes.
    static ClassVocabulary with_change_classes(std::vector<std::string> change_classes);
    static ClassVocabulary generic_binary() { return with_change_classes({"change"}); }

    const std::vector<std::string>& names() const { return names_; }
    int change_class_count() const { return static_cast<int>(names_.size()) - 1; }
    const std::string& name(int index) const { return names_[static_cast<std::size_t>(index)]; }
    bool operator==(const ClassVocabulary& o) const { return names_ == o.names_; }

    // Violation messages; empty means well-formed. `for_bcd` additionally
    // requires a single change class.
    std::vector<std::string> validate(bool for_bcd) const;

private:
    std::vector<std::string> names_;
};

struct GroundTruth {
    BinaryMask change_mask;
    std::optional<LabelMap> sem_t1;
    std::optional<LabelMap> sem_t2;

    bool is_scd() const { return sem_t1.has_value() && sem_t2.has_value(); }
};

struct Sample {
    ImagePair pair;
    GroundTruth gt;
    std::string source_id;
    ClassVocabulary vocabulary;

    TaskKind task() const { return gt.is_scd() ? TaskKind::Scd : TaskKind::Bcd; }
};

struct TaskQuery {
    TaskKind task = TaskKind::Bcd;
    std::string instruction;
    ClassVocabulary vocabulary;
};

// Predicted logit maps. change_logits is H x W; semantic logits are
// C x H x W with C = N + 1 and are present exactly for SCD queries.
struct MaskBundle {
    Tensor change_logits;
    std::optional<Tensor> t1_logits;
    std::optional<Tensor> t2_logits;

    bool is_scd() const { return t1_logits.has_value() && t2_logits.has_value(); }
};

// Returns violation messages; an empty list means every invariant holds.
std::vector<std::string> validate_sample(const Sample& sample);

// 1 where the labels differ, 0 elsewhere. Symmetric in its arguments.
BinaryMask binarize_semantic_change(const LabelMap& sem_t1, const LabelMap& sem_t2);

}  // namespace tokencd
