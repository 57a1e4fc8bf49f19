#include "tokencd/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tokencd/png_io.hpp"

namespace fs = std::filesystem;

namespace tokencd {

// ---------------------------------------------------------------------------
// ChangeModel
// ---------------------------------------------------------------------------

ChangeModel::ChangeModel(TokenVocabulary vocab, ModelConfig cfg, std::uint64_t seed)
    : cfg_(cfg),
      init_rng_(seed * 0x2545f4914f6cdd1dull + 0x9e3779b97f4a7c15ull),
      codec_(std::move(vocab), cfg.codec, store_, init_rng_),
      encoder_(cfg.encoder, store_, init_rng_),
      decoder_(cfg.decoder, store_, init_rng_) {
    if (cfg_.codec.d_dec != cfg_.decoder.d_dec || cfg_.encoder.d_dec() != cfg_.decoder.d_dec)
        throw std::invalid_argument("ChangeModel: decoder width mismatch across modules");
    if (cfg_.codec.d_lm != cfg_.decoder.d_lm)
        throw std::invalid_argument("ChangeModel: language width mismatch across modules");
}

ChangeModel::ForwardResult ChangeModel::forward(const ImagePair& pair, const TaskQuery& query,
                                                ExtractMode mode) const {
    if (query.instruction.empty()) throw std::invalid_argument("forward: instruction must be non-empty");
    ForwardResult out;
    const std::vector<int> prompt = codec_.encode_prompt(query.instruction);
    if (mode == ExtractMode::TeacherForced) {
        out.response = render_target_response(codec_.vocab(), query);
        out.txt_loss = codec_.lm_loss(prompt, out.response);
    } else {
        out.response = codec_.generate(prompt, 24);
    }
    out.embeddings = codec_.extract_task_embeddings(prompt, out.response, mode);

    ag::Var e0 = decoder_.init_queries(out.embeddings);
    auto [p1, p2] = encoder_.encode_pair(pair);
    TokenDecoder::RefineResult refined = decoder_.refine_all(p1, p2, e0);
    out.streams = decoder_.fuse_streams(refined.refined_t1, refined.refined_t2);

    std::vector<ag::Var> names;
    for (int c = 0; c < query.vocabulary.change_class_count() + 1; ++c)
        names.push_back(codec_.class_name_embedding(query.vocabulary.name(c)));
    ProjectedTaskEmbeddings proj = decoder_.split_project(refined.e4, names);
    out.bundle = decoder_.generate_masks(out.streams, proj, pair.height(), pair.width(), query.task);
    return out;
}

namespace {

Tensor hwc_to_chw(const Tensor& hwc) {
    const int h = hwc.dim(0), w = hwc.dim(1), c = hwc.dim(2);
    Tensor out({c, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                out[(static_cast<std::int64_t>(ch) * h + y) * w + x] = hwc[(static_cast<std::int64_t>(y) * w + x) * c + ch];
    return out;
}

}  // namespace

MaskBundle ChangeModel::infer(const ImagePair& pair, const TaskQuery& query) const {
    ForwardResult fwd = forward(pair, query, ExtractMode::Generated);
    MaskBundle bundle;
    bundle.change_logits = fwd.bundle.change_logits->value;
    if (query.task == TaskKind::Scd) {
        bundle.t1_logits = hwc_to_chw(fwd.bundle.t1_logits->value);
        bundle.t2_logits = hwc_to_chw(fwd.bundle.t2_logits->value);
    }
    return bundle;
}

// ---------------------------------------------------------------------------
// sources & vocabulary
// ---------------------------------------------------------------------------

SampleSource SampleSource::from_manifest(const DatasetManifest& manifest, const std::string& split) {
    SampleSource src;
    src.source_id = manifest.source_id;
    src.task = manifest.task;
    src.vocabulary = manifest.vocabulary;
    for (const auto& record : manifest.split(split)) src.samples.push_back(load_sample(manifest, record));
    return src;
}

SampleSource SampleSource::from_samples(std::vector<Sample> samples, TaskKind task) {
    if (samples.empty()) throw std::invalid_argument("SampleSource: empty sample list");
    SampleSource src;
    src.source_id = samples.front().source_id;
    src.task = task;
    src.vocabulary = samples.front().vocabulary;
    src.samples = std::move(samples);
    return src;
}

TokenVocabulary vocabulary_for_sources(const std::vector<SampleSource>& sources) {
    std::vector<std::string> words;
    for (const auto& src : sources)
        for (const auto& name : src.vocabulary.names()) words.push_back(name);
    return TokenVocabulary::build(words);
}

// ---------------------------------------------------------------------------
// config files
// ---------------------------------------------------------------------------

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["learning_rate"] = learning_rate;
    j["weight_decay"] = weight_decay;
    j["grad_clip_norm"] = grad_clip_norm;
    j["batch_size"] = batch_size;
    j["grad_accum_steps"] = grad_accum_steps;
    j["epochs"] = epochs;
    j["steps_per_epoch"] = steps_per_epoch;
    j["loss_weights"] = {{"bce", loss_weights.bce}, {"dice", loss_weights.dice}, {"ss", loss_weights.ss}, {"sc", loss_weights.sc}};
    j["seed"] = seed;
    j["checkpoint_dir"] = checkpoint_dir;
    return j.dump(2);
}

namespace {

void apply_config_json(TrainConfig& cfg, const nlohmann::json& j) {
    if (j.contains("learning_rate")) cfg.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("weight_decay")) cfg.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("grad_clip_norm")) cfg.grad_clip_norm = j["grad_clip_norm"].get<double>();
    if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<int>();
    if (j.contains("grad_accum_steps")) cfg.grad_accum_steps = j["grad_accum_steps"].get<int>();
    if (j.contains("epochs")) cfg.epochs = j["epochs"].get<int>();
    if (j.contains("steps_per_epoch")) cfg.steps_per_epoch = j["steps_per_epoch"].get<int>();
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("checkpoint_dir")) cfg.checkpoint_dir = j["checkpoint_dir"].get<std::string>();
    if (j.contains("loss_weights")) {
        const auto& w = j["loss_weights"];
        if (w.contains("bce")) cfg.loss_weights.bce = w["bce"].get<double>();
        if (w.contains("dice")) cfg.loss_weights.dice = w["dice"].get<double>();
        if (w.contains("ss")) cfg.loss_weights.ss = w["ss"].get<double>();
        if (w.contains("sc")) cfg.loss_weights.sc = w["sc"].get<double>();
    }
    for (const auto& [key, value] : j.items()) {
        (void)value;
        static const std::set<std::string> known{"learning_rate", "weight_decay",    "grad_clip_norm",
                                                 "batch_size",    "grad_accum_steps", "epochs",
                                                 "steps_per_epoch", "loss_weights",   "seed",
                                                 "checkpoint_dir"};
        if (!known.count(key)) throw std::invalid_argument("unknown config key: " + key);
    }
}

}  // namespace

TrainConfig parse_train_config_json(const std::string& text) {
    TrainConfig cfg;
    apply_config_json(cfg, nlohmann::json::parse(text));
    return cfg;
}

TrainConfig parse_train_config_toml(const std::string& text) {
    // Flat key = value subset with [section] headers and dotted keys.
    nlohmann::json j = nlohmann::json::object();
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw std::invalid_argument("toml: bad section at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("toml: expected key=value at line " + std::to_string(lineno));
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (!section.empty()) key = section + "." + key;
        nlohmann::json parsed;
        if (!value.empty() && value.front() == '"') {
            if (value.size() < 2 || value.back() != '"')
                throw std::invalid_argument("toml: unterminated string at line " + std::to_string(lineno));
            parsed = value.substr(1, value.size() - 2);
        } else if (value == "true" || value == "false") {
            parsed = value == "true";
        } else {
            try {
                if (value.find_first_of(".eE") != std::string::npos)
                    parsed = std::stod(value);
                else
                    parsed = static_cast<std::int64_t>(std::stoll(value));
            } catch (const std::exception&) {
                throw std::invalid_argument("toml: bad value at line " + std::to_string(lineno));
            }
        }
        // Dotted keys nest one level (loss_weights.bce).
        const auto dot = key.find('.');
        if (dot == std::string::npos)
            j[key] = parsed;
        else
            j[key.substr(0, dot)][key.substr(dot + 1)] = parsed;
    }
    TrainConfig cfg;
    apply_config_json(cfg, j);
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string ext = fs::path(path).extension().string();
    if (ext == ".toml") return parse_train_config_toml(buf.str());
    return parse_train_config_json(buf.str());
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'T', 'C', 'K', 'D', '0', '0', '0', '1'};

nlohmann::json model_config_to_json(const ModelConfig& m) {
    return nlohmann::json{
        {"codec",
         {{"d_lm", m.codec.d_lm},
          {"d_dec", m.codec.d_dec},
          {"blocks", m.codec.blocks},
          {"heads", m.codec.heads},
          {"ffn_mult", m.codec.ffn_mult},
          {"max_len", m.codec.max_len}}},
        {"encoder",
         {{"in_channels", m.encoder.in_channels},
          {"widths", std::vector<int>(m.encoder.stage_widths.begin(), m.encoder.stage_widths.end())}}},
        {"decoder",
         {{"d_dec", m.decoder.d_dec}, {"d_lm", m.decoder.d_lm}, {"heads", m.decoder.heads}, {"ffn_mult", m.decoder.ffn_mult}}}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig m;
    const auto& c = j.at("codec");
    m.codec.d_lm = c.at("d_lm").get<int>();
    m.codec.d_dec = c.at("d_dec").get<int>();
    m.codec.blocks = c.at("blocks").get<int>();
    m.codec.heads = c.at("heads").get<int>();
    m.codec.ffn_mult = c.at("ffn_mult").get<int>();
    m.codec.max_len = c.at("max_len").get<int>();
    const auto& e = j.at("encoder");
    m.encoder.in_channels = e.at("in_channels").get<int>();
    const auto widths = e.at("widths").get<std::vector<int>>();
    std::copy_n(widths.begin(), 4, m.encoder.stage_widths.begin());
    const auto& d = j.at("decoder");
    m.decoder.d_dec = d.at("d_dec").get<int>();
    m.decoder.d_lm = d.at("d_lm").get<int>();
    m.decoder.heads = d.at("heads").get<int>();
    m.decoder.ffn_mult = d.at("ffn_mult").get<int>();
    return m;
}

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); }

std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

void write_tensor(std::ostream& out, const Tensor& t) {
    write_u64(out, static_cast<std::uint64_t>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) write_u64(out, static_cast<std::uint64_t>(t.dim(d)));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in) {
    const auto ndim = read_u64(in);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(read_u64(in));
    Tensor t(std::move(shape));
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    return t;
}

void write_string(std::ostream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
    const auto n = read_u64(in);
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    nlohmann::json meta;
    meta["model"] = model_config_to_json(ckpt.model);
    meta["train"] = nlohmann::json::parse(ckpt.train.to_json());
    meta["vocab"] = nlohmann::json::parse(ckpt.vocab.to_json());
    meta["global_step"] = ckpt.global_step;
    meta["epoch"] = ckpt.epoch;
    meta["step_in_epoch"] = ckpt.step_in_epoch;
    meta["rng_state"] = ckpt.rng_state;
    meta["adam_step"] = ckpt.adam_step;
    write_string(out, meta.dump());
    write_u64(out, ckpt.params.size());
    for (const auto& [name, tensor] : ckpt.params) {
        write_string(out, name);
        write_tensor(out, tensor);
    }
    write_u64(out, ckpt.adam_m.size());
    for (std::size_t i = 0; i < ckpt.adam_m.size(); ++i) {
        write_tensor(out, ckpt.adam_m[i]);
        write_tensor(out, ckpt.adam_v[i]);
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("not a checkpoint file: " + path);
    const nlohmann::json meta = nlohmann::json::parse(read_string(in));
    Checkpoint ckpt;
    ckpt.model = model_config_from_json(meta.at("model"));
    {
        TrainConfig cfg;
        apply_config_json(cfg, meta.at("train"));
        ckpt.train = cfg;
    }
    ckpt.vocab = TokenVocabulary::from_json(meta.at("vocab").dump());
    ckpt.global_step = meta.at("global_step").get<std::int64_t>();
    ckpt.epoch = meta.at("epoch").get<int>();
    ckpt.step_in_epoch = meta.at("step_in_epoch").get<int>();
    ckpt.rng_state = meta.at("rng_state").get<std::string>();
    ckpt.adam_step = meta.at("adam_step").get<std::int64_t>();
    const auto n_params = read_u64(in);
    for (std::uint64_t i = 0; i < n_params; ++i) {
        std::string name = read_string(in);
        Tensor t = read_tensor(in);
        ckpt.params.emplace_back(std::move(name), std::move(t));
    }
    const auto n_opt = read_u64(in);
    for (std::uint64_t i = 0; i < n_opt; ++i) {
        ckpt.adam_m.push_back(read_tensor(in));
        ckpt.adam_v.push_back(read_tensor(in));
    }
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return ckpt;
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

namespace {

std::vector<int> source_sizes(const std::vector<SampleSource>& sources) {
    std::vector<int> sizes;
    for (const auto& s : sources) sizes.push_back(static_cast<int>(s.samples.size()));
    return sizes;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, std::vector<SampleSource> sources)
    : cfg_(cfg),
      sources_(std::move(sources)),
      sampler_(source_sizes(sources_), cfg.batch_size, cfg.seed),
      rng_(cfg.seed ^ 0xda3e39cb94b95bdbull) {
    model_ = std::make_unique<ChangeModel>(vocabulary_for_sources(sources_), ModelConfig{}, cfg_.seed);
    opt_.lr = cfg_.learning_rate;
    opt_.weight_decay = cfg_.weight_decay;
}

std::unique_ptr<ChangeModel> model_from_checkpoint(const Checkpoint& ckpt) {
    auto model = std::make_unique<ChangeModel>(ckpt.vocab, ckpt.model, ckpt.train.seed);
    const auto& params = model->store().params();
    if (params.size() != ckpt.params.size()) throw std::runtime_error("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->name != ckpt.params[i].first) throw std::runtime_error("checkpoint parameter order mismatch");
        if (!params[i]->value.same_shape(ckpt.params[i].second))
            throw std::runtime_error("checkpoint parameter shape mismatch: " + params[i]->name);
        params[i]->value = ckpt.params[i].second;
    }
    return model;
}

Trainer::Trainer(const Checkpoint& resume, std::vector<SampleSource> sources)
    : cfg_(resume.train),
      sources_(std::move(sources)),
      sampler_(source_sizes(sources_), resume.train.batch_size, resume.train.seed),
      rng_(resume.train.seed ^ 0xda3e39cb94b95bdbull) {
    model_ = model_from_checkpoint(resume);
    opt_.lr = cfg_.learning_rate;
    opt_.weight_decay = cfg_.weight_decay;
    if (!resume.adam_m.empty()) {
        opt_.moment1() = resume.adam_m;
        opt_.moment2() = resume.adam_v;
        opt_.step_count() = resume.adam_step;
    }
    global_step_ = resume.global_step;
    epoch_ = resume.epoch;
    step_in_epoch_ = resume.step_in_epoch;
    if (!resume.rng_state.empty()) {
        std::istringstream state(resume.rng_state);
        state >> rng_;
    }
}

int Trainer::steps_per_epoch() const {
    if (cfg_.steps_per_epoch > 0) return cfg_.steps_per_epoch;
    const int batches = sampler_.batches_per_epoch();
    return (batches + cfg_.grad_accum_steps - 1) / cfg_.grad_accum_steps;
}

LossReport Trainer::train_step(const std::vector<BatchRef>& plan, std::size_t& cursor, std::string& source_ids) {
    ag::zero_grads(model_->store().params());
    LossReport avg;
    avg.gated = true;
    int micro_count = 0;
    const int accum = cfg_.grad_accum_steps;
    for (int a = 0; a < accum; ++a) {
        const BatchRef& batch = plan[cursor % plan.size()];
        ++cursor;
        const SampleSource& src = sources_[static_cast<std::size_t>(batch.source)];
        if (source_ids.find(src.source_id) == std::string::npos) {
            if (!source_ids.empty()) source_ids += "+";
            source_ids += src.source_id;
        }
        const TaskQuery query = make_task_query(src.task, src.vocabulary);
        ag::Var batch_total;
        LossReport batch_report;
        for (int idx : batch.indices) {
            const Sample& sample = src.samples[static_cast<std::size_t>(idx)];
            ChangeModel::ForwardResult fwd = model_->forward(sample.pair, query, ExtractMode::TeacherForced);
            MaskLoss mask = mask_loss(fwd.bundle, sample.gt, fwd.streams, cfg_.loss_weights, src.task == TaskKind::Scd);
            LossGraph graph = total_loss(fwd.txt_loss, mask, cfg_.loss_weights);
            for (const auto& [name, value] : std::initializer_list<std::pair<const char*, double>>{
                     {"txt", graph.report.txt}, {"bce", graph.report.bce}, {"dice", graph.report.dice},
                     {"ss", graph.report.ss},   {"sc", graph.report.sc},   {"total", graph.report.total}})
                if (!std::isfinite(value)) throw NanLossError(name, global_step_);
            batch_total = batch_total ? ag::add(batch_total, graph.total) : graph.total;
            batch_report.total += graph.report.total;
            batch_report.txt += graph.report.txt;
            batch_report.bce += graph.report.bce;
            batch_report.dice += graph.report.dice;
            batch_report.ss += graph.report.ss;
            batch_report.sc += graph.report.sc;
            batch_report.gated = graph.report.gated;
        }
        const double inv_batch = 1.0 / static_cast<double>(batch.indices.size());
        // Mean over the batch, then 1/accum so accumulated micro-batches match
        // one large mean-reduced batch.
        ag::Var scaled = ag::scale(batch_total, inv_batch / static_cast<double>(accum));
        ag::backward(scaled);
        avg.total += batch_report.total * inv_batch;
        avg.txt += batch_report.txt * inv_batch;
        avg.bce += batch_report.bce * inv_batch;
        avg.dice += batch_report.dice * inv_batch;
        avg.ss += batch_report.ss * inv_batch;
        avg.sc += batch_report.sc * inv_batch;
        avg.gated = avg.gated && batch_report.gated;
        ++micro_count;
    }
    const double inv = 1.0 / micro_count;
    avg.total *= inv;
    avg.txt *= inv;
    avg.bce *= inv;
    avg.dice *= inv;
    avg.ss *= inv;
    avg.sc *= inv;
    if (cfg_.grad_clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& p : model_->store().params())
            for (std::int64_t j = 0; j < p->grad.size(); ++j) sq += p->grad[j] * p->grad[j];
        const double norm = std::sqrt(sq);
        if (norm > cfg_.grad_clip_norm) {
            const double scale = cfg_.grad_clip_norm / norm;
            for (const auto& p : model_->store().params())
                for (std::int64_t j = 0; j < p->grad.size(); ++j) p->grad[j] *= scale;
        }
    }
    opt_.step(model_->store().params());
    return avg;
}

void Trainer::run(const StepCallback& callback) {
    const int per_epoch = steps_per_epoch();
    for (; epoch_ < cfg_.epochs; ++epoch_, step_in_epoch_ = 0) {
        const std::vector<BatchRef> plan = sampler_.plan_epoch(epoch_);
        std::size_t cursor = static_cast<std::size_t>(step_in_epoch_) * static_cast<std::size_t>(cfg_.grad_accum_steps);
        while (step_in_epoch_ < per_epoch) {
            StepLog entry;
            entry.report = train_step(plan, cursor, entry.source_id);
            entry.step = global_step_++;
            ++step_in_epoch_;  // the step is complete; snapshots resume after it
            log_.push_back(entry);
            if (callback && !callback(log_.back())) return;
        }
    }
}

Checkpoint Trainer::snapshot() const {
    Checkpoint ckpt;
    ckpt.model = model_->config();
    ckpt.train = cfg_;
    ckpt.vocab = model_->codec().vocab();
    ckpt.global_step = global_step_;
    ckpt.epoch = epoch_;
    ckpt.step_in_epoch = step_in_epoch_;
    std::ostringstream state;
    state << rng_;
    ckpt.rng_state = state.str();
    ckpt.adam_step = opt_.step_count_const();
    ckpt.adam_m = opt_.moment1_const();
    ckpt.adam_v = opt_.moment2_const();
    for (const auto& p : model_->store().params()) ckpt.params.emplace_back(p->name, p->value);
    return ckpt;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

BinaryMask decode_change_mask(const Tensor& change_logits) {
    BinaryMask m(change_logits.dim(0), change_logits.dim(1));
    for (std::size_t i = 0; i < m.data.size(); ++i)
        m.data[i] = change_logits[static_cast<std::int64_t>(i)] > 0.0 ? 1 : 0;  // sigmoid(z) > 0.5
    return m;
}

LabelMap decode_semantic_labels(const Tensor& chw_logits, const BinaryMask& change) {
    const int c = chw_logits.dim(0), h = chw_logits.dim(1), w = chw_logits.dim(2);
    LabelMap labels(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!change.at(y, x)) continue;  // predicted-unchanged pixels keep class 0
            int best = 0;
            double best_v = chw_logits[(static_cast<std::int64_t>(0) * h + y) * w + x];
            for (int ch = 1; ch < c; ++ch) {
                const double v = chw_logits[(static_cast<std::int64_t>(ch) * h + y) * w + x];
                if (v > best_v) {
                    best_v = v;
                    best = ch;
                }
            }
            labels.at(y, x) = best;
        }
    return labels;
}

MetricReport evaluate_source(const Predictor& predict, const SampleSource& source) {
    BinaryCounts counts;
    const int n = source.vocabulary.change_class_count();
    ScdConfusion confusion(source.task == TaskKind::Scd ? n : 1);
    for (const Sample& sample : source.samples) {
        const MaskBundle bundle = predict(sample);
        const BinaryMask pred_change = decode_change_mask(bundle.change_logits);
        counts += binary_counts(pred_change, sample.gt.change_mask);
        if (source.task == TaskKind::Scd) {
            if (!bundle.is_scd()) throw std::invalid_argument("evaluate: scd source but bundle lacks semantic maps");
            const LabelMap pred_t1 = decode_semantic_labels(*bundle.t1_logits, pred_change);
            const LabelMap pred_t2 = decode_semantic_labels(*bundle.t2_logits, pred_change);
            confusion += scd_confusion(pred_t1, pred_t2, *sample.gt.sem_t1, *sample.gt.sem_t2, n);
        } else {
            for (std::size_t i = 0; i < pred_change.data.size(); ++i)
                ++confusion.q(pred_change.data[i], sample.gt.change_mask.data[i]);
        }
    }
    return make_report(counts, confusion, source.task == TaskKind::Scd);
}

MetricReport evaluate_model(const ChangeModel& model, const SampleSource& source) {
    const TaskQuery query = make_task_query(source.task, source.vocabulary);
    return evaluate_source([&](const Sample& s) { return model.infer(s.pair, query); }, source);
}

// ---------------------------------------------------------------------------
// prediction to files
// ---------------------------------------------------------------------------

PredictionFiles predict_to_files(const ChangeModel& model, const std::string& t1_path, const std::string& t2_path,
                                 const TaskQuery& query, const std::string& out_dir, bool composite_figure) {
    ImagePair pair;
    pair.img1 = read_rgb_png(t1_path);
    pair.img2 = read_rgb_png(t2_path);
    if (pair.img1.h != pair.img2.h || pair.img1.w != pair.img2.w)
        throw std::invalid_argument("predict: image sizes differ");
    if (pair.img1.h % 32 != 0 || pair.img1.w % 32 != 0)
        throw std::invalid_argument("predict: image size must be divisible by 32");

    const MaskBundle bundle = model.infer(pair, query);
    const BinaryMask change = decode_change_mask(bundle.change_logits);

    fs::create_directories(out_dir);
    PredictionFiles out;
    const std::string change_path = (fs::path(out_dir) / "change.png").string();
    write_mask_png(change, change_path);
    out.files.push_back(change_path);
    if (query.task == TaskKind::Scd) {
        const LabelMap sem1 = decode_semantic_labels(*bundle.t1_logits, change);
        const LabelMap sem2 = decode_semantic_labels(*bundle.t2_logits, change);
        const std::string p1 = (fs::path(out_dir) / "sem_t1.png").string();
        const std::string p2 = (fs::path(out_dir) / "sem_t2.png").string();
        write_label_png(sem1, p1);
        write_label_png(sem2, p2);
        out.files.push_back(p1);
        out.files.push_back(p2);
    }
    if (composite_figure) {
        const int h = pair.img1.h, w = pair.img1.w;
        Image fig(h, 3 * w, 3);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) {
                    fig.at(y, x, c) = pair.img1.at(y, x, c);
                    fig.at(y, w + x, c) = pair.img2.at(y, x, c);
                    const double overlay = change.at(y, x) ? (c == 0 ? 1.0 : 0.15) : pair.img2.at(y, x, c);
                    fig.at(y, 2 * w + x, c) = overlay;
                }
        const std::string fig_path = (fs::path(out_dir) / "composite.png").string();
        write_rgb_png(fig, fig_path);
        out.files.push_back(fig_path);
    }
    return out;
}

}  // namespace tokencd
