#include <doctest.h>

#include <algorithm>
#include <random>

#include "gradcheck.hpp"
#include "tokencd/instruction_codec.hpp"

using namespace tokencd;

namespace {

struct CodecFixture {
    nn::ParamStore store;
    std::mt19937_64 rng{12345};
    CodecConfig cfg;
    InstructionCodec codec;

    explicit CodecFixture(std::vector<std::string> extra = {"square", "circle", "triangle", "building"})
        : cfg{32, 24, 2, 4, 2, 64},  // small dims keep the tests quick
          codec(TokenVocabulary::build(extra), cfg, store, rng) {}
};

int count_token(const std::vector<int>& seq, int id) {
    return static_cast<int>(std::count(seq.begin(), seq.end(), id));
}

// Trains only the language stack on the two response templates.
double overfit_templates(CodecFixture& f, const std::vector<TaskQuery>& queries, int steps, double lr) {
    nn::AdamW opt;
    opt.lr = lr;
    double last = 1e9;
    for (int s = 0; s < steps; ++s) {
        ag::zero_grads(f.store.params());
        ag::Var total;
        for (const auto& q : queries) {
            const auto prompt = f.codec.encode_prompt(q.instruction);
            const auto target = render_target_response(f.codec.vocab(), q);
            ag::Var loss = f.codec.lm_loss(prompt, target);
            total = total ? ag::add(total, loss) : loss;
        }
        total = ag::scale(total, 1.0 / static_cast<double>(queries.size()));
        ag::backward(total);
        opt.step(f.store.params());
        last = total->value[0];
        if (last < 0.005) break;
    }
    return last;
}

}  // namespace

TEST_CASE("instruction templates") {
    const TaskQuery bcd = make_task_query(TaskKind::Bcd, ClassVocabulary::generic_binary());
    CHECK(bcd.instruction == "please segment all areas that have undergone change.");

    const TaskQuery named = make_task_query(TaskKind::Bcd, ClassVocabulary::with_change_classes({"square"}));
    CHECK(named.instruction == "please segment all areas that have undergone change. classes: square.");

    const TaskQuery scd = make_task_query(TaskKind::Scd, ClassVocabulary::with_change_classes({"building"}));
    CHECK(scd.instruction == "please segment the semantic masks of the changed areas. classes: building.");

    const TaskQuery multi =
        make_task_query(TaskKind::Scd, ClassVocabulary::with_change_classes({"building", "tree"}));
    CHECK(multi.instruction.find("classes: building, tree.") != std::string::npos);

    TaskQuery empty;
    empty.task = TaskKind::Scd;
    empty.vocabulary = ClassVocabulary(std::vector<std::string>{"nochange"});
    CHECK_THROWS(render_instruction(empty));
}

TEST_CASE("target responses place the task tokens") {
    const TokenVocabulary vocab = TokenVocabulary::build({"building"});
    const TaskQuery bcd = make_task_query(TaskKind::Bcd, ClassVocabulary::generic_binary());
    const auto bcd_target = render_target_response(vocab, bcd);
    CHECK(count_token(bcd_target, vocab.change_id()) == 1);
    CHECK(count_token(bcd_target, vocab.t1_id()) == 0);
    CHECK(count_token(bcd_target, vocab.t2_id()) == 0);
    const int specials = count_token(bcd_target, vocab.change_id()) + count_token(bcd_target, vocab.t1_id()) +
                         count_token(bcd_target, vocab.t2_id());
    CHECK(specials == 1);

    const TaskQuery scd = make_task_query(TaskKind::Scd, ClassVocabulary::with_change_classes({"building"}));
    const auto scd_target = render_target_response(vocab, scd);
    CHECK(count_token(scd_target, vocab.t1_id()) == 1);
    CHECK(count_token(scd_target, vocab.t2_id()) == 1);
    CHECK(count_token(scd_target, vocab.change_id()) == 1);
    const auto p1 = std::find(scd_target.begin(), scd_target.end(), vocab.t1_id());
    const auto p2 = std::find(scd_target.begin(), scd_target.end(), vocab.t2_id());
    const auto pc = std::find(scd_target.begin(), scd_target.end(), vocab.change_id());
    CHECK(p1 < p2);
    CHECK(p2 < pc);
}

TEST_CASE("vocabulary serialization keeps special ids stable") {
    const TokenVocabulary vocab = TokenVocabulary::build({"square", "low vegetation"});
    const TokenVocabulary back = TokenVocabulary::from_json(vocab.to_json());
    CHECK(back.size() == vocab.size());
    CHECK(back.t1_id() == vocab.t1_id());
    CHECK(back.t2_id() == vocab.t2_id());
    CHECK(back.change_id() == vocab.change_id());
    CHECK(back.t1_id() != back.t2_id());
    CHECK(back.t2_id() != back.change_id());
    CHECK(back.id("square") == vocab.id("square"));
    CHECK(back.id("vegetation") == vocab.id("vegetation"));
    CHECK_THROWS(vocab.id("unseen"));
}

TEST_CASE("word split handles punctuation and task tokens") {
    const auto words = word_split("the semantic masks are [T1] [T2] and the change mask is [CHANGE].");
    CHECK(std::count(words.begin(), words.end(), std::string("[T1]")) == 1);
    CHECK(std::count(words.begin(), words.end(), std::string("[CHANGE]")) == 1);
    CHECK(words.back() == ".");
    const auto classes = word_split("classes: building, tree.");
    CHECK(classes == std::vector<std::string>{"classes", ":", "building", ",", "tree", "."});
}

TEST_CASE("untrained generation obeys the length contract") {
    CodecFixture f;
    const auto prompt = f.codec.encode_prompt("please segment all areas that have undergone change.");
    const auto out = f.codec.generate(prompt, 10);
    CHECK(out.size() <= 10);
    CHECK_THROWS(f.codec.generate({}, 10));
}

TEST_CASE("uniform-logit lm loss equals ln V") {
    CodecFixture f;
    // Zero the output projection: logits become uniform.
    f.store.find("lm.out_proj.w")->value.fill(0.0);
    f.store.find("lm.out_proj.b")->value.fill(0.0);
    const auto prompt = f.codec.encode_prompt("please segment all areas that have undergone change.");
    const TaskQuery q = make_task_query(TaskKind::Bcd, ClassVocabulary::generic_binary());
    const auto target = render_target_response(f.codec.vocab(), q);
    const double expected = std::log(static_cast<double>(f.codec.vocab().size()));
    CHECK(f.codec.lm_loss(prompt, target)->value[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("lm loss gradient matches finite differences") {
    CodecFixture f;
    const auto prompt = f.codec.encode_prompt("please segment all areas that have undergone change.");
    const std::vector<int> target{f.codec.vocab().change_id(), f.codec.vocab().eos_id()};  // 2-token target
    auto loss_fn = [&] { return f.codec.lm_loss(prompt, target); };
    CHECK(gradcheck::max_rel_error(loss_fn, f.store.find("lm.out_proj.w"), 1e-5, 40) < 1e-4);
    CHECK(gradcheck::max_rel_error(loss_fn, f.store.find("lm.token_emb"), 1e-5, 40) < 1e-4);
    CHECK(gradcheck::max_rel_error(loss_fn, f.store.find("lm.block0.attn.q.w"), 1e-5, 40) < 1e-4);
}

TEST_CASE("overfit lm emits the task tokens in order") {
    CodecFixture f;
    const TaskQuery bcd = make_task_query(TaskKind::Bcd, ClassVocabulary::with_change_classes({"square"}));
    const TaskQuery scd = make_task_query(TaskKind::Scd, ClassVocabulary::with_change_classes({"building"}));
    const double final_loss = overfit_templates(f, {bcd, scd}, 500, 1e-2);
    CHECK(final_loss < 0.01);

    const auto& vocab = f.codec.vocab();
    const auto bcd_out = f.codec.generate(f.codec.encode_prompt(bcd.instruction), 24);
    CHECK(count_token(bcd_out, vocab.change_id()) >= 1);

    const auto scd_out = f.codec.generate(f.codec.encode_prompt(scd.instruction), 24);
    const auto p1 = std::find(scd_out.begin(), scd_out.end(), vocab.t1_id());
    const auto p2 = std::find(scd_out.begin(), scd_out.end(), vocab.t2_id());
    const auto pc = std::find(scd_out.begin(), scd_out.end(), vocab.change_id());
    REQUIRE(p1 != scd_out.end());
    REQUIRE(p2 != scd_out.end());
    REQUIRE(pc != scd_out.end());
    CHECK(p1 < p2);
    CHECK(p2 < pc);

    // Generated-mode extraction now finds every token.
    const auto emb = f.codec.extract_task_embeddings(f.codec.encode_prompt(scd.instruction), scd_out,
                                                     ExtractMode::Generated);
    CHECK(emb.t1_present);
    CHECK(emb.t2_present);
    CHECK(emb.change_present);
}

TEST_CASE("teacher-forced extraction flags by task") {
    CodecFixture f;
    const TaskQuery scd = make_task_query(TaskKind::Scd, ClassVocabulary::with_change_classes({"building"}));
    const auto scd_prompt = f.codec.encode_prompt(scd.instruction);
    const auto scd_target = render_target_response(f.codec.vocab(), scd);
    const auto scd_emb = f.codec.extract_task_embeddings(scd_prompt, scd_target, ExtractMode::TeacherForced);
    CHECK(scd_emb.t1_present);
    CHECK(scd_emb.t2_present);
    CHECK(scd_emb.change_present);

    const TaskQuery bcd = make_task_query(TaskKind::Bcd, ClassVocabulary::generic_binary());
    const auto bcd_prompt = f.codec.encode_prompt(bcd.instruction);
    const auto bcd_target = render_target_response(f.codec.vocab(), bcd);
    const auto bcd_emb = f.codec.extract_task_embeddings(bcd_prompt, bcd_target, ExtractMode::TeacherForced);
    CHECK(!bcd_emb.t1_present);
    CHECK(!bcd_emb.t2_present);
    CHECK(bcd_emb.change_present);
    // Fallback rows are the learned default queries.
    for (std::int64_t i = 0; i < bcd_emb.t1->value.size(); ++i)
        CHECK(bcd_emb.t1->value[i] == f.store.find("lm.default_query_t1")->value[i]);

    // A response with no task tokens signals via all-false flags.
    const std::vector<int> empty_resp{f.codec.vocab().eos_id()};
    const auto none = f.codec.extract_task_embeddings(bcd_prompt, empty_resp, ExtractMode::Generated);
    CHECK(!none.t1_present);
    CHECK(!none.t2_present);
    CHECK(!none.change_present);
}

TEST_CASE("projection width follows the decoder width for every task") {
    CodecFixture f;
    for (TaskKind task : {TaskKind::Bcd, TaskKind::Scd}) {
        const TaskQuery q = make_task_query(task, task == TaskKind::Bcd
                                                      ? ClassVocabulary::generic_binary()
                                                      : ClassVocabulary::with_change_classes({"building"}));
        const auto prompt = f.codec.encode_prompt(q.instruction);
        const auto target = render_target_response(f.codec.vocab(), q);
        const auto emb = f.codec.extract_task_embeddings(prompt, target, ExtractMode::TeacherForced);
        CHECK(emb.t1->value.size() == f.cfg.d_dec);
        CHECK(emb.t2->value.size() == f.cfg.d_dec);
        CHECK(emb.change->value.size() == f.cfg.d_dec);
    }
}

TEST_CASE("determinism and prompt sensitivity") {
    CodecFixture f;
    const TaskQuery a = make_task_query(TaskKind::Bcd, ClassVocabulary::with_change_classes({"square"}));
    const TaskQuery b = make_task_query(TaskKind::Bcd, ClassVocabulary::with_change_classes({"circle"}));
    const auto prompt_a = f.codec.encode_prompt(a.instruction);
    const auto prompt_b = f.codec.encode_prompt(b.instruction);
    const auto target = render_target_response(f.codec.vocab(), a);

    const auto gen1 = f.codec.generate(prompt_a, 16);
    const auto gen2 = f.codec.generate(prompt_a, 16);
    CHECK(gen1 == gen2);

    const auto emb1 = f.codec.extract_task_embeddings(prompt_a, target, ExtractMode::TeacherForced);
    const auto emb1_again = f.codec.extract_task_embeddings(prompt_a, target, ExtractMode::TeacherForced);
    for (std::int64_t i = 0; i < emb1.change->value.size(); ++i)
        CHECK(emb1.change->value[i] == emb1_again.change->value[i]);

    // Different prompts move the hidden state at the [CHANGE] position.
    const auto emb2 = f.codec.extract_task_embeddings(prompt_b, target, ExtractMode::TeacherForced);
    double diff = 0.0;
    for (std::int64_t i = 0; i < emb1.change->value.size(); ++i)
        diff += std::abs(emb1.change->value[i] - emb2.change->value[i]);
    CHECK(diff > 1e-9);

    // Permuting the prompt changes at least one extracted embedding.
    auto permuted = prompt_a;
    REQUIRE(permuted.size() >= 4);
    std::swap(permuted[1], permuted[3]);
    const auto emb3 = f.codec.extract_task_embeddings(permuted, target, ExtractMode::TeacherForced);
    double pdiff = 0.0;
    for (std::int64_t i = 0; i < emb1.change->value.size(); ++i)
        pdiff += std::abs(emb1.change->value[i] - emb3.change->value[i]);
    CHECK(pdiff > 1e-9);
}

TEST_CASE("class name embeddings average the word embeddings") {
    CodecFixture f({"low vegetation", "tree"});
    const auto veg = f.codec.class_name_embedding("low vegetation");
    const auto low = f.codec.class_name_embedding("low");
    const auto vegetation = f.codec.class_name_embedding("vegetation");
    for (std::int64_t i = 0; i < veg->value.size(); ++i)
        CHECK(veg->value[i] == doctest::Approx(0.5 * (low->value[i] + vegetation->value[i])).epsilon(1e-12));
    CHECK_THROWS(f.codec.class_name_embedding("water"));
}
