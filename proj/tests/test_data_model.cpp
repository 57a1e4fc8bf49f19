#include <doctest.h>

#include <algorithm>
#include <random>

#include "tokencd/data_model.hpp"

using namespace tokencd;

namespace {

Sample make_bcd_sample(int size = 64) {
    Sample s;
    s.pair.img1 = Image(size, size, 3);
    s.pair.img2 = Image(size, size, 3);
    for (auto& v : s.pair.img1.data) v = 0.25;
    for (auto& v : s.pair.img2.data) v = 0.75;
    s.gt.change_mask = BinaryMask(size, size);
    s.gt.change_mask.at(3, 4) = 1;
    s.source_id = "unit";
    s.vocabulary = ClassVocabulary::generic_binary();
    return s;
}

Sample make_scd_sample(int size = 64, int classes = 3) {
    Sample s = make_bcd_sample(size);
    std::vector<std::string> names;
    const char* base[] = {"square", "circle", "triangle", "cross"};
    for (int i = 0; i < classes; ++i) names.emplace_back(base[i]);
    s.vocabulary = ClassVocabulary::with_change_classes(names);
    LabelMap s1(size, size), s2(size, size);
    s1.at(3, 4) = 1;
    s2.at(3, 4) = 2;  // the only changed pixel transitions 1 -> 2
    s.gt.sem_t1 = s1;
    s.gt.sem_t2 = s2;
    return s;
}

bool has_violation(const std::vector<std::string>& v, const std::string& needle) {
    return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
}

}  // namespace

TEST_CASE("well-formed bcd sample has no violations") {
    CHECK(validate_sample(make_bcd_sample()) == std::vector<std::string>{});
}

TEST_CASE("well-formed scd sample has no violations") {
    CHECK(validate_sample(make_scd_sample()) == std::vector<std::string>{});
}

TEST_CASE("unpaired semantic maps are flagged") {
    Sample s = make_scd_sample();
    s.gt.sem_t2.reset();
    CHECK(has_violation(validate_sample(s), "semantic maps must be paired"));
}

TEST_CASE("unchanged pixels must keep their class") {
    Sample s = make_scd_sample();
    s.gt.sem_t1->at(10, 10) = 1;
    s.gt.sem_t2->at(10, 10) = 2;  // change_mask is 0 here
    CHECK(has_violation(validate_sample(s), "unchanged pixels must keep class"));
}

TEST_CASE("dimension and range violations") {
    Sample s = make_bcd_sample();
    s.pair.img2 = Image(64, 32, 3);
    CHECK(has_violation(validate_sample(s), "identical shape"));

    Sample odd = make_bcd_sample(48);
    CHECK(has_violation(validate_sample(odd), "divisible by 32"));

    Sample hot = make_bcd_sample();
    hot.pair.img1.at(0, 0, 0) = 1.5;
    CHECK(has_violation(validate_sample(hot), "[0,1]"));

    Sample label_high = make_scd_sample();
    label_high.gt.sem_t2->at(3, 4) = 9;
    CHECK(has_violation(validate_sample(label_high), "exceed"));

    Sample bad_vocab = make_bcd_sample();
    bad_vocab.vocabulary = ClassVocabulary::with_change_classes({"a", "b"});
    CHECK(has_violation(validate_sample(bad_vocab), "exactly one change class"));
}

TEST_CASE("vocabulary invariants") {
    CHECK(ClassVocabulary::with_change_classes({"building"}).validate(true).empty());
    CHECK(!ClassVocabulary::with_change_classes({"Building"}).validate(true).empty());
    CHECK(!ClassVocabulary::with_change_classes({"a", "a"}).validate(false).empty());
    CHECK(!ClassVocabulary::with_change_classes({""}).validate(false).empty());
    CHECK(ClassVocabulary::with_change_classes({"low vegetation", "tree"}).validate(false).empty());
}

TEST_CASE("binarize identity gives all zeros") {
    LabelMap a(2, 2);
    a.data = {0, 1, 2, 2};
    const BinaryMask m = binarize_semantic_change(a, a);
    CHECK(std::all_of(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v == 0; }));
}

TEST_CASE("binarize elementwise inequality") {
    LabelMap a(2, 2), b(2, 2);
    a.data = {0, 1, 2, 2};
    b.data = {0, 2, 2, 0};
    const BinaryMask m = binarize_semantic_change(a, b);
    CHECK(m.data == std::vector<std::uint8_t>{0, 1, 0, 1});
}

TEST_CASE("binarize total change") {
    LabelMap a(3, 3), b(3, 3);
    for (auto& v : a.data) v = 3;
    const BinaryMask m = binarize_semantic_change(a, b);
    CHECK(std::all_of(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v == 1; }));
}

TEST_CASE("binarize rejects shape mismatch") {
    LabelMap a(2, 2), b(2, 3);
    CHECK_THROWS(binarize_semantic_change(a, b));
}

TEST_CASE("binarize is symmetric") {
    std::mt19937_64 rng(33);
    std::uniform_int_distribution<int> dist(0, 3);
    LabelMap a(8, 8), b(8, 8);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        a.data[i] = dist(rng);
        b.data[i] = dist(rng);
    }
    CHECK(binarize_semantic_change(a, b).data == binarize_semantic_change(b, a).data);
}
