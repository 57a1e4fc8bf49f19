#include "tokencd/instruction_codec.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tokencd {

namespace {

const std::vector<std::string>& template_words() {
    static const std::vector<std::string> words = {
        "please", "segment", "all", "areas", "that", "have", "undergone", "change", "the",  "semantic",
        "masks",  "of",      "changed", "classes", "mask", "for", "is", "are", "and", ".", ",", ":"};
    return words;
}

bool is_punct_token(char c) { return c == '.' || c == ',' || c == ':'; }

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

}  // namespace

std::vector<std::string> word_split(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
        // Peel punctuation off both ends, keeping it as separate tokens.
        std::size_t begin = 0, end = word.size();
        std::vector<std::string> trailing;
        while (begin < end && is_punct_token(word[begin])) out.emplace_back(1, word[begin++]);
        while (end > begin && is_punct_token(word[end - 1])) trailing.emplace_back(1, word[--end]);
        if (end > begin) {
            const std::string core = word.substr(begin, end - begin);
            std::string upper;
            for (char c : core) upper += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            if (upper == TokenVocabulary::kT1 || upper == TokenVocabulary::kT2 || upper == TokenVocabulary::kChange)
                out.push_back(upper);
            else
                out.push_back(lower(core));
        }
        out.insert(out.end(), trailing.rbegin(), trailing.rend());
    }
    return out;
}

void TokenVocabulary::insert(const std::string& token) {
    if (to_id_.count(token)) return;
    to_id_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(token);
}

TokenVocabulary TokenVocabulary::build(const std::vector<std::string>& extra_words) {
    TokenVocabulary v;
    for (const char* s : {kPad, kBos, kEos, kT1, kT2, kChange}) v.insert(s);
    for (const auto& w : template_words()) v.insert(w);
    std::set<std::string> extras;
    for (const auto& e : extra_words)
        for (const auto& w : word_split(e)) extras.insert(w);
    for (const auto& w : extras) v.insert(w);
    return v;
}

int TokenVocabulary::id(const std::string& token) const {
    auto it = to_id_.find(token);
    if (it == to_id_.end()) throw std::invalid_argument("token not in vocabulary: " + token);
    return it->second;
}

std::vector<int> TokenVocabulary::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : word_split(text)) ids.push_back(id(w));
    return ids;
}

std::string TokenVocabulary::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
        if (!out.empty()) out += ' ';
        out += token(i);
    }
    return out;
}

std::string TokenVocabulary::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (int i = 0; i < size(); ++i) j[token(i)] = i;
    return j.dump(2);
}

TokenVocabulary TokenVocabulary::from_json(const std::string& json_text) {
    const auto j = nlohmann::json::parse(json_text);
    std::vector<std::string> tokens(j.size());
    for (auto it = j.begin(); it != j.end(); ++it) {
        const int id = it.value().get<int>();
        if (id < 0 || id >= static_cast<int>(tokens.size())) throw std::invalid_argument("vocabulary ids must be dense");
        tokens[static_cast<std::size_t>(id)] = it.key();
    }
    TokenVocabulary v;
    for (const auto& t : tokens) {
        if (t.empty()) throw std::invalid_argument("vocabulary ids must be dense");
        v.insert(t);
    }
    return v;
}

namespace {

std::string join_change_classes(const ClassVocabulary& vocab) {
    std::string out;
    for (int c = 1; c <= vocab.change_class_count(); ++c) {
        if (!out.empty()) out += ", ";
        out += vocab.name(c);
    }
    return out;
}

}  // namespace

std::string render_instruction(const TaskQuery& query) {
    const auto violations = query.vocabulary.validate(query.task == TaskKind::Bcd);
    if (!violations.empty()) throw std::invalid_argument("render_instruction: " + violations.front());
    if (query.task == TaskKind::Bcd) {
        std::string base = "please segment all areas that have undergone change.";
        if (query.vocabulary.change_class_count() == 1 && query.vocabulary.name(1) == "change") return base;
        return base + " classes: " + join_change_classes(query.vocabulary) + ".";
    }
    return "please segment the semantic masks of the changed areas. classes: " + join_change_classes(query.vocabulary) +
           ".";
}

TaskQuery make_task_query(TaskKind task, const ClassVocabulary& vocabulary) {
    TaskQuery q;
    q.task = task;
    q.vocabulary = vocabulary;
    q.instruction = render_instruction(q);
    return q;
}

std::string render_target_response_text(const TaskQuery& query) {
    // The queried class names sit directly ahead of the task tokens, so the
    // hidden states extracted at those tokens are conditioned on the classes
    // the instruction asked for.
    const std::string classes = join_change_classes(query.vocabulary);
    if (query.task == TaskKind::Bcd) return "the change mask for " + classes + " is [CHANGE].";
    return "the semantic masks for " + classes + " are [T1] [T2] and the change mask is [CHANGE].";
}

std::vector<int> render_target_response(const TokenVocabulary& vocab, const TaskQuery& query) {
    std::vector<int> ids = vocab.encode(render_target_response_text(query));
    ids.push_back(vocab.eos_id());
    return ids;
}

// ---------------------------------------------------------------------------
// InstructionCodec
// ---------------------------------------------------------------------------

InstructionCodec::InstructionCodec(TokenVocabulary vocab, CodecConfig cfg, nn::ParamStore& store, std::mt19937_64& rng)
    : vocab_(std::move(vocab)), cfg_(cfg) {
    token_emb_ = nn::Embedding::create(store, "lm.token_emb", vocab_.size(), cfg_.d_lm, rng);
    pos_emb_ = nn::Embedding::create(store, "lm.pos_emb", cfg_.max_len, cfg_.d_lm, rng);
    blocks_.reserve(static_cast<std::size_t>(cfg_.blocks));
    for (int b = 0; b < cfg_.blocks; ++b) {
        const std::string prefix = "lm.block" + std::to_string(b);
        Block blk{nn::LayerNorm::create(store, prefix + ".ln1", cfg_.d_lm),
                  nn::LayerNorm::create(store, prefix + ".ln2", cfg_.d_lm),
                  nn::MultiheadAttention::create(store, prefix + ".attn", cfg_.d_lm, cfg_.heads, rng),
                  nn::Mlp::create(store, prefix + ".ffn", cfg_.d_lm, cfg_.d_lm * cfg_.ffn_mult, cfg_.d_lm, rng)};
        blocks_.push_back(std::move(blk));
    }
    ln_f_ = nn::LayerNorm::create(store, "lm.ln_f", cfg_.d_lm);
    out_proj_ = nn::Linear::create(store, "lm.out_proj", cfg_.d_lm, vocab_.size(), rng);
    task_proj_ = nn::Mlp::create(store, "lm.task_proj", cfg_.d_lm, cfg_.d_dec, cfg_.d_dec, rng);
    default_t1_ = store.make("lm.default_query_t1", nn::uniform_init({cfg_.d_dec}, -0.05, 0.05, rng));
    default_t2_ = store.make("lm.default_query_t2", nn::uniform_init({cfg_.d_dec}, -0.05, 0.05, rng));
    default_change_ = store.make("lm.default_query_change", nn::uniform_init({cfg_.d_dec}, -0.05, 0.05, rng));
}

ag::Var InstructionCodec::hidden_states(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw std::invalid_argument("hidden_states: empty sequence");
    const int n = static_cast<int>(tokens.size());
    if (n > cfg_.max_len) throw std::invalid_argument("hidden_states: sequence exceeds max_len");
    std::vector<int> positions(tokens.size());
    for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;
    ag::Var x = ag::add(token_emb_(tokens), pos_emb_(positions));
    const Tensor mask = ag::causal_mask(n);
    for (const Block& blk : blocks_) {
        ag::Var q = blk.ln1(x);
        x = ag::add(x, blk.attn(q, q, q, &mask));
        x = ag::add(x, blk.mlp(blk.ln2(x)));
    }
    return ln_f_(x);
}

std::vector<int> InstructionCodec::generate(const std::vector<int>& prompt, int max_len,
                                            std::span<const double> image_summary) const {
    (void)image_summary;  // text-only stand-in
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    std::vector<int> seq = prompt;
    std::vector<int> out;
    for (int step = 0; step < max_len && static_cast<int>(seq.size()) < cfg_.max_len; ++step) {
        ag::Var h = hidden_states(seq);
        ag::Var logits = out_proj_(h);
        const int n = logits->value.dim(0), v = logits->value.dim(1);
        const double* last = logits->value.data() + static_cast<std::int64_t>(n - 1) * v;
        int best = 0;
        for (int j = 1; j < v; ++j)
            if (last[j] > last[best]) best = j;
        out.push_back(best);
        if (best == vocab_.eos_id()) break;
        seq.push_back(best);
    }
    return out;
}

ag::Var InstructionCodec::lm_loss(const std::vector<int>& prompt, const std::vector<int>& target) const {
    if (prompt.empty() || target.empty()) throw std::invalid_argument("lm_loss: empty prompt or target");
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), target.begin(), target.end());
    ag::Var h = hidden_states(seq);
    // Position p predicts token p+1; target positions start at |prompt|.
    const int p0 = static_cast<int>(prompt.size()) - 1;
    ag::Var pred_rows = ag::slice_rows(h, p0, static_cast<int>(seq.size()) - 1);
    ag::Var logits = out_proj_(pred_rows);
    return ag::cross_entropy_rows(logits, target);
}

ag::Var InstructionCodec::project_hidden(const ag::Var& h) const {
    ag::Var rowed = ag::reshape(h, {1, cfg_.d_lm});
    return ag::reshape(task_proj_(rowed), {cfg_.d_dec});
}

TaskEmbeddings InstructionCodec::extract_task_embeddings(const std::vector<int>& prompt,
                                                         const std::vector<int>& response, ExtractMode mode) const {
    (void)mode;  // teacher-forced and generated responses extract identically
    if (prompt.empty() || response.empty()) throw std::invalid_argument("extract_task_embeddings: empty input");
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), response.begin(), response.end());
    ag::Var h = hidden_states(seq);
    auto find_pos = [&](int token_id) -> int {
        for (std::size_t i = 0; i < response.size(); ++i)
            if (response[i] == token_id) return static_cast<int>(prompt.size() + i);
        return -1;
    };
    TaskEmbeddings emb;
    const int pt1 = find_pos(vocab_.t1_id());
    const int pt2 = find_pos(vocab_.t2_id());
    const int pch = find_pos(vocab_.change_id());
    if (pt1 >= 0) {
        emb.raw_t1 = ag::row(h, pt1);
        emb.t1 = project_hidden(emb.raw_t1);
        emb.t1_present = true;
    } else {
        emb.t1 = default_t1_;
    }
    if (pt2 >= 0) {
        emb.raw_t2 = ag::row(h, pt2);
        emb.t2 = project_hidden(emb.raw_t2);
        emb.t2_present = true;
    } else {
        emb.t2 = default_t2_;
    }
    if (pch >= 0) {
        emb.raw_change = ag::row(h, pch);
        emb.change = project_hidden(emb.raw_change);
        emb.change_present = true;
    } else {
        emb.change = default_change_;
    }
    return emb;
}

ag::Var InstructionCodec::class_name_embedding(const std::string& name) const {
    const auto words = word_split(name);
    if (words.empty()) throw std::invalid_argument("class_name_embedding: empty name");
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(vocab_.id(w));
    ag::Var rows = token_emb_(ids);
    ag::Var summed = ag::matmul(ag::constant(Tensor::full({1, static_cast<int>(ids.size())}, 1.0 / ids.size())), rows);
    return ag::reshape(summed, {cfg_.d_lm});
}

std::vector<int> InstructionCodec::encode_prompt(const std::string& instruction) const {
    if (instruction.empty()) throw std::invalid_argument("encode_prompt: empty instruction");
    std::vector<int> ids{vocab_.bos_id()};
    const auto words = vocab_.encode(instruction);
    ids.insert(ids.end(), words.begin(), words.end());
    return ids;
}

}  // namespace tokencd
