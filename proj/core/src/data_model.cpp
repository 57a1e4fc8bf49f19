#include "tokencd/data_model.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>
#include <unordered_set>

namespace tokencd {

std::string to_string(TaskKind task) { return task == TaskKind::Bcd ? "bcd" : "scd"; }

TaskKind task_from_string(const std::string& s) {
    if (s == "bcd") return TaskKind::Bcd;
    if (s == "scd") return TaskKind::Scd;
    throw std::invalid_argument("unknown task kind: " + s);
}

ClassVocabulary ClassVocabulary::with_change_classes(std::vector<std::string> change_classes) {
    std::vector<std::string> names;
    names.reserve(change_classes.size() + 1);
    names.emplace_back("nochange");
    for (auto& c : change_classes) names.push_back(std::move(c));
    return ClassVocabulary(std::move(names));
}

std::vector<std::string> ClassVocabulary::validate(bool for_bcd) const {
    std::vector<std::string> violations;
    if (names_.size() < 2) {
        violations.push_back("vocabulary must contain the background class and at least one change class");
        return violations;
    }
    std::unordered_set<std::string> seen;
    for (const auto& n : names_) {
        if (n.empty()) violations.push_back("class names must be non-empty");
        if (!seen.insert(n).second) violations.push_back("class names must be unique: " + n);
        for (unsigned char ch : n)
            if (std::isupper(ch)) {
                violations.push_back("class names must be lowercase: " + n);
                break;
            }
    }
    if (for_bcd && change_class_count() != 1) violations.push_back("bcd vocabularies must have exactly one change class");
    return violations;
}

namespace {

bool shape_matches(const Image& img, int h, int w) { return img.h == h && img.w == w; }

}  // namespace

std::vector<std::string> validate_sample(const Sample& sample) {
    std::vector<std::string> v;
    const Image& a = sample.pair.img1;
    const Image& b = sample.pair.img2;
    if (a.h != b.h || a.w != b.w || a.c != b.c) v.push_back("dual-temporal images must have identical shape");
    if (a.h % 32 != 0 || a.w % 32 != 0) v.push_back("image height and width must be divisible by 32");
    bool pixels_ok = true;
    for (const Image* img : {&a, &b})
        for (double px : img->data) pixels_ok = pixels_ok && px >= 0.0 && px <= 1.0;
    if (!pixels_ok) v.push_back("pixel values must lie in [0,1]");
    if (sample.gt.change_mask.h != a.h || sample.gt.change_mask.w != a.w)
        v.push_back("change mask shape must match the images");
    for (std::uint8_t m : sample.gt.change_mask.data)
        if (m > 1) {
            v.push_back("change mask must be binary");
            break;
        }
    if (sample.gt.sem_t1.has_value() != sample.gt.sem_t2.has_value()) v.push_back("semantic maps must be paired");

    const int n_change = sample.vocabulary.change_class_count();
    auto voc = sample.vocabulary.validate(!sample.gt.is_scd());
    v.insert(v.end(), voc.begin(), voc.end());

    if (sample.gt.is_scd()) {
        const LabelMap& s1 = *sample.gt.sem_t1;
        const LabelMap& s2 = *sample.gt.sem_t2;
        if (!shape_matches(a, s1.h, s1.w) || !shape_matches(a, s2.h, s2.w))
            v.push_back("semantic map shape must match the images");
        else {
            bool range_ok = true, keep_ok = true;
            for (int y = 0; y < s1.h && (range_ok || keep_ok); ++y)
                for (int x = 0; x < s1.w; ++x) {
                    if (s1.at(y, x) < 0 || s1.at(y, x) > n_change || s2.at(y, x) < 0 || s2.at(y, x) > n_change)
                        range_ok = false;
                    if (sample.gt.change_mask.at(y, x) == 0 && s1.at(y, x) != s2.at(y, x)) keep_ok = false;
                }
            if (!range_ok) v.push_back("semantic labels must not exceed the vocabulary size");
            if (!keep_ok) v.push_back("unchanged pixels must keep class");
        }
    }
    return v;
}

BinaryMask binarize_semantic_change(const LabelMap& sem_t1, const LabelMap& sem_t2) {
    if (sem_t1.h != sem_t2.h || sem_t1.w != sem_t2.w)
        throw std::invalid_argument("binarize_semantic_change: shape mismatch");
    BinaryMask out(sem_t1.h, sem_t1.w);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = sem_t1.data[i] != sem_t2.data[i] ? 1 : 0;
    return out;
}

}  // namespace tokencd
