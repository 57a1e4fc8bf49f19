#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "tokencd/datagen.hpp"
#include "tokencd/instruction_codec.hpp"
#include "tokencd/losses.hpp"
#include "tokencd/metrics.hpp"
#include "tokencd/token_decoder.hpp"
#include "tokencd/vision_encoder.hpp"

namespace tokencd {

struct ModelConfig {
    CodecConfig codec;
    EncoderConfig encoder;
    DecoderConfig decoder;
};

// Full pipeline: instruction codec -> siamese encoder -> token decoder.
class ChangeModel {
public:
    ChangeModel(TokenVocabulary vocab, ModelConfig cfg, std::uint64_t seed);

    nn::ParamStore& store() { return store_; }
    const nn::ParamStore& store() const { return store_; }
    const ModelConfig& config() const { return cfg_; }
    const InstructionCodec& codec() const { return codec_; }
    const VisionEncoder& encoder() const { return encoder_; }
    const TokenDecoder& decoder() const { return decoder_; }

    struct ForwardResult {
        MaskBundleVars bundle;
        FusedStreamsVars streams;
        ag::Var txt_loss;  // null in generated mode
        TaskEmbeddings embeddings;
        std::vector<int> response;
    };

    // Teacher forcing extracts embeddings from the rendered target response
    // (training); generated mode decodes greedily first (inference).
    ForwardResult forward(const ImagePair& pair, const TaskQuery& query, ExtractMode mode) const;

    // Inference convenience: detached logits, semantic maps as C x H x W.
    MaskBundle infer(const ImagePair& pair, const TaskQuery& query) const;

private:
    ModelConfig cfg_;
    nn::ParamStore store_;
    std::mt19937_64 init_rng_;
    InstructionCodec codec_;
    VisionEncoder encoder_;
    TokenDecoder decoder_;
};

// In-memory training/eval source; manifests materialize into this.
struct SampleSource {
    std::string source_id;
    TaskKind task = TaskKind::Bcd;
    ClassVocabulary vocabulary;
    std::vector<Sample> samples;

    static SampleSource from_manifest(const DatasetManifest& manifest, const std::string& split);
    static SampleSource from_samples(std::vector<Sample> samples, TaskKind task);
};

struct TrainConfig {
    double learning_rate = 5e-5;
    double weight_decay = 0.0;
    double grad_clip_norm = 1.0;  // global L2 clip applied after accumulation; 0 disables
    int batch_size = 1;
    int grad_accum_steps = 8;
    int epochs = 1;
    int steps_per_epoch = 0;  // 0: one pass over every source per epoch
    LossWeights loss_weights;
    std::uint64_t seed = 0;
    std::string checkpoint_dir;

    std::string to_json() const;
};

// Accepts .json or a flat key=value TOML subset; keys mirror the TrainConfig
// field names (loss_weights.bce etc. for the nested weights).
TrainConfig load_train_config(const std::string& path);
TrainConfig parse_train_config_json(const std::string& text);
TrainConfig parse_train_config_toml(const std::string& text);

struct StepLog {
    std::int64_t step = 0;
    std::string source_id;
    LossReport report;
};

// Raised when any loss term stops being finite; names the offending term.
class NanLossError : public std::runtime_error {
public:
    NanLossError(std::string term, std::int64_t step)
        : std::runtime_error("non-finite loss term '" + term + "' at step " + std::to_string(step)), term_(std::move(term)) {}
    const std::string& term() const { return term_; }

private:
    std::string term_;
};

struct Checkpoint {
    ModelConfig model;
    TrainConfig train;
    TokenVocabulary vocab;
    std::int64_t global_step = 0;
    int epoch = 0;
    int step_in_epoch = 0;
    std::string rng_state;
    std::int64_t adam_step = 0;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<Tensor> adam_m, adam_v;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Rebuilds the model and restores its parameters (optimizer state ignored).
std::unique_ptr<ChangeModel> model_from_checkpoint(const Checkpoint& ckpt);

class Trainer {
public:
    Trainer(TrainConfig cfg, std::vector<SampleSource> sources);
    Trainer(const Checkpoint& resume, std::vector<SampleSource> sources);

    ChangeModel& model() { return *model_; }
    const ChangeModel& model() const { return *model_; }
    const std::vector<StepLog>& log() const { return log_; }
    std::int64_t global_step() const { return global_step_; }
    int steps_per_epoch() const;

    // Trains through cfg.epochs; optional callback fires after each
    // optimization step and may stop training early by returning false.
    using StepCallback = std::function<bool(const StepLog&)>;
    void run(const StepCallback& callback = nullptr);

    Checkpoint snapshot() const;

private:
    TrainConfig cfg_;
    std::vector<SampleSource> sources_;
    std::unique_ptr<ChangeModel> model_;
    MixedSampler sampler_;
    nn::AdamW opt_;
    std::vector<StepLog> log_;
    std::int64_t global_step_ = 0;
    int epoch_ = 0;
    int step_in_epoch_ = 0;
    std::mt19937_64 rng_;

    LossReport train_step(const std::vector<BatchRef>& plan, std::size_t& cursor, std::string& source_ids);
};

// Builds the token vocabulary covering every source's class names.
TokenVocabulary vocabulary_for_sources(const std::vector<SampleSource>& sources);

// Evaluation: change probability thresholded at 0.5; SCD labels take the
// channel argmax masked by the predicted change region.
using Predictor = std::function<MaskBundle(const Sample&)>;
MetricReport evaluate_source(const Predictor& predict, const SampleSource& source);
MetricReport evaluate_model(const ChangeModel& model, const SampleSource& source);

// Per-sample mask decode helpers shared by eval and the CLI.
BinaryMask decode_change_mask(const Tensor& change_logits);
LabelMap decode_semantic_labels(const Tensor& chw_logits, const BinaryMask& change);

struct PredictionFiles {
    std::vector<std::string> files;
};

PredictionFiles predict_to_files(const ChangeModel& model, const std::string& t1_path, const std::string& t2_path,
                                 const TaskQuery& query, const std::string& out_dir, bool composite_figure);

}  // namespace tokencd
