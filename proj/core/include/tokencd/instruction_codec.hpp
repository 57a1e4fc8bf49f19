#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "tokencd/data_model.hpp"
#include "tokencd/nn.hpp"

namespace tokencd {

// Word-level closed vocabulary. The three task tokens plus BOS/EOS/PAD hold
// fixed low ids; remaining words are sorted for stable assignment.
class TokenVocabulary {
public:
    static constexpr const char* kPad = "<pad>";
    static constexpr const char* kBos = "<bos>";
    static constexpr const char* kEos = "<eos>";
    static constexpr const char* kT1 = "[T1]";
    static constexpr const char* kT2 = "[T2]";
    static constexpr const char* kChange = "[CHANGE]";

    TokenVocabulary() = default;

    // Template words plus the given extra words (class names, whitespace-split).
    static TokenVocabulary build(const std::vector<std::string>& extra_words = {});

    int size() const { return static_cast<int>(tokens_.size()); }
    int id(const std::string& token) const;
    bool contains(const std::string& token) const { return to_id_.count(token) > 0; }
    const std::string& token(int id) const { return tokens_[static_cast<std::size_t>(id)]; }

    int pad_id() const { return id(kPad); }
    int bos_id() const { return id(kBos); }
    int eos_id() const { return id(kEos); }
    int t1_id() const { return id(kT1); }
    int t2_id() const { return id(kT2); }
    int change_id() const { return id(kChange); }

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    std::string to_json() const;  // flat {token: id} map
    static TokenVocabulary from_json(const std::string& json_text);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> to_id_;
    void insert(const std::string& token);
};

// Lowercased word split; '.', ',' and ':' become standalone tokens and the
// bracketed task tokens stay atomic.
std::vector<std::string> word_split(const std::string& text);

// Deterministic instruction template. BCD vocabularies with a non-generic
// change class append the class clause so multi-source prompts stay
// distinguishable.
std::string render_instruction(const TaskQuery& query);

TaskQuery make_task_query(TaskKind task, const ClassVocabulary& vocabulary);

// Target response template as token ids (EOS-terminated). BCD mentions
// [CHANGE] once; SCD mentions [T1], [T2], [CHANGE] once each, in order.
std::vector<int> render_target_response(const TokenVocabulary& vocab, const TaskQuery& query);
std::string render_target_response_text(const TaskQuery& query);

enum class ExtractMode { TeacherForced, Generated };

struct TaskEmbeddings {
    ag::Var t1, t2, change;              // projected to decoder width
    ag::Var raw_t1, raw_t2, raw_change;  // LM hidden rows (null when absent)
    bool t1_present = false, t2_present = false, change_present = false;
};

struct CodecConfig {
    int d_lm = 64;
    int d_dec = 64;
    int blocks = 2;
    int heads = 4;
    int ffn_mult = 4;
    int max_len = 64;
};

// Trainable autoregressive stand-in for the instruction model: causal
// transformer over the closed vocabulary, with a projection head mapping the
// task-token hidden states into decoder queries and learned fallback queries
// for tokens a generated response omits.
class InstructionCodec {
public:
    InstructionCodec(TokenVocabulary vocab, CodecConfig cfg, nn::ParamStore& store, std::mt19937_64& rng);

    const TokenVocabulary& vocab() const { return vocab_; }
    const CodecConfig& config() const { return cfg_; }

    // Last-layer hidden states, one row per input token.
    ag::Var hidden_states(const std::vector<int>& tokens) const;

    // Greedy decoding from the prompt; stops at EOS or after max_len new
    // tokens. `image_summary` is accepted for interface compatibility with a
    // full multimodal model; this stub conditions on text only.
    std::vector<int> generate(const std::vector<int>& prompt, int max_len,
                              std::span<const double> image_summary = {}) const;

    // Mean next-token cross-entropy over the target positions only.
    ag::Var lm_loss(const std::vector<int>& prompt, const std::vector<int>& target) const;

    TaskEmbeddings extract_task_embeddings(const std::vector<int>& prompt, const std::vector<int>& response,
                                           ExtractMode mode) const;

    // Mean of the word embeddings of a (possibly multi-word) class name.
    ag::Var class_name_embedding(const std::string& name) const;

    std::vector<int> encode_prompt(const std::string& instruction) const;  // BOS + words

private:
    TokenVocabulary vocab_;
    CodecConfig cfg_;
    nn::Embedding token_emb_;
    nn::Embedding pos_emb_;
    struct Block {
        nn::LayerNorm ln1, ln2;
        nn::MultiheadAttention attn;
        nn::Mlp mlp;
    };
    std::vector<Block> blocks_;
    nn::LayerNorm ln_f_;
    nn::Linear out_proj_;
    nn::Mlp task_proj_;  // d_lm -> d_dec
    ag::Var default_t1_, default_t2_, default_change_;

    ag::Var project_hidden(const ag::Var& h) const;  // 1-D d_lm -> 1-D d_dec
};

}  // namespace tokencd
