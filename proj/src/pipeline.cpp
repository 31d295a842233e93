#include "pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "checkpoint.hpp"
#include "metrics.hpp"

namespace voxlm::pipeline {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kSchemaMae = "mae";
constexpr const char* kSchemaSft1 = "sft-stage1";
constexpr const char* kSchemaSft2 = "sft-stage2";

// line-JSON run log; no wall-clock fields so reruns are byte-identical
class RunLog {
public:
    explicit RunLog(const std::string& path) {
        if (!path.empty()) {
            os_.open(path, std::ios::trunc);
            if (!os_) throw FormatError("log: cannot open for write: " + path);
        }
    }
    void line(const ordered_json& j) {
        if (os_.is_open()) os_ << j.dump() << '\n';
    }

private:
    std::ofstream os_;
};

struct Dataset {
    std::string root;
    std::vector<InstructionSample> train, test;
};

Dataset load_dataset(const std::string& data_dir) {
    Dataset d;
    d.root = data_dir;
    if (!fs::exists(fs::path(data_dir) / "train.jsonl"))
        throw FormatError("data: " + data_dir + " does not contain train.jsonl");
    d.train = read_jsonl((fs::path(data_dir) / "train.jsonl").string());
    if (fs::exists(fs::path(data_dir) / "test.jsonl"))
        d.test = read_jsonl((fs::path(data_dir) / "test.jsonl").string());
    if (d.train.empty()) throw FormatError("data: train.jsonl is empty");
    return d;
}

Grid<float> load_grid(const std::string& root, const std::string& volume_path,
                      const RunConfig& cfg) {
    fs::path p = fs::path(volume_path).is_absolute() ? fs::path(volume_path)
                                                     : fs::path(root) / volume_path;
    Volume v = read_rvol(p.string());
    return preprocess<float>(v, cfg.preprocess);
}

std::vector<std::string> unique_volume_paths(const std::vector<InstructionSample>& samples) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& s : samples)
        if (seen.insert(s.volume_path).second) out.push_back(s.volume_path);
    return out;
}

void stamp_meta(Checkpoint& ck, const char* schema, const RunConfig& cfg) {
    ck.put_meta_str("meta.schema", schema);
    ck.put_meta("meta.seed", static_cast<double>(cfg.train.seed));
    ck.put_meta_str("meta.config_hash", cfg.hash_hex());
    ck.put_meta_str("meta.vit", cfg.to_json()["vit"].dump());
}

void check_vit_meta(const Checkpoint& ck, const RunConfig& cfg) {
    if (ck.get_meta_str("meta.vit") != cfg.to_json()["vit"].dump())
        throw CheckpointError("checkpoint: encoder config does not match the active config");
}

std::string require_schema(const Checkpoint& ck, std::initializer_list<const char*> allowed) {
    if (!ck.has("meta.schema")) throw CheckpointError("checkpoint: missing schema tag");
    std::string schema = ck.get_meta_str("meta.schema");
    for (const char* a : allowed)
        if (schema == a) return schema;
    throw CheckpointError("checkpoint: unexpected schema '" + schema + "'");
}

// ---- the aligned vision-language assembly ----

struct Aligned {
    RunConfig cfg;
    Vocab vocab;
    std::unique_ptr<Mae<float>> encoder;
    ParamStore<float> head;
    std::unique_ptr<Perceiver<float>> perceiver;
    std::unique_ptr<DecoderLM<float>> lm;

    Aligned(const RunConfig& run_cfg, const Vocab& v, bool with_lora) : cfg(run_cfg), vocab(v) {
        encoder = std::make_unique<Mae<float>>(cfg.vit, cfg.train.seed);
        Rng head_rng = Rng(cfg.train.seed).derive(0x5f7);
        perceiver = std::make_unique<Perceiver<float>>(cfg.perceiver, cfg.vit.embed_dim,
                                                       cfg.vit.grid().dims, head, "perceiver",
                                                       head_rng);
        lm = std::make_unique<DecoderLM<float>>(cfg.lm, vocab.size(), head, "lm", head_rng);
        if (with_lora) {
            Rng lora_rng = Rng(cfg.train.seed).derive(0x10a);
            lm->attach_lora(head, cfg.lora, lora_rng);
        }
    }

    // perceived image tokens for one batch of cached encoder outputs
    TokenBatch<float> perceive(const Tensor<float>& image_tokens) const {
        TokenBatch<float> enc{Var<float>::constant(image_tokens), cfg.vit.grid().dims};
        return perceiver->forward(enc);
    }

    void save(const std::string& path, const char* schema, int stage) const {
        Checkpoint ck;
        stamp_meta(ck, schema, cfg);
        ck.put_meta("meta.stage", stage);
        ck.put_meta_str("meta.perceiver.kind", to_string(cfg.perceiver.kind));
        ck.put_meta("meta.perceiver.k", static_cast<double>(cfg.perceiver.k));
        ck.put_meta("meta.perceiver.out_channels", static_cast<double>(cfg.perceiver.out_channels));
        ck.put_meta_str("meta.vocab", vocab.serialize());
        ck.put_meta_str("meta.vocab_hash", std::to_string(vocab.fingerprint()));
        for (auto& [name, t] : encoder->params().snapshot()) ck.put(name, t);
        for (auto& [name, t] : head.snapshot()) ck.put(name, t);
        ck.save(path);
    }
};

void check_perceiver_meta(const Checkpoint& ck, const RunConfig& cfg) {
    if (ck.get_meta_str("meta.perceiver.kind") != to_string(cfg.perceiver.kind) ||
        static_cast<int64_t>(ck.get_meta("meta.perceiver.k")) != cfg.perceiver.k ||
        static_cast<int64_t>(ck.get_meta("meta.perceiver.out_channels")) !=
            cfg.perceiver.out_channels)
        throw CheckpointError("checkpoint: perceiver spec does not match the active config");
}

std::unique_ptr<Aligned> load_aligned(const std::string& ckpt_path, const RunConfig& cfg) {
    Checkpoint ck = Checkpoint::load(ckpt_path);
    std::string schema = require_schema(ck, {kSchemaSft1, kSchemaSft2});
    check_vit_meta(ck, cfg);
    check_perceiver_meta(ck, cfg);
    Vocab vocab = Vocab::deserialize(ck.get_meta_str("meta.vocab"));
    if (ck.get_meta_str("meta.vocab_hash") != std::to_string(vocab.fingerprint()))
        throw CheckpointError("checkpoint: stored vocab does not match its hash tag");
    auto model = std::make_unique<Aligned>(cfg, vocab, schema == kSchemaSft2);
    auto table = ck.as_table();
    model->encoder->params().restore(table);
    model->head.restore(table);
    return model;
}

// encoder outputs are cached per volume: the encoder is frozen during SFT,
// so one pass per volume is exact
std::map<std::string, Tensor<float>> build_encoder_cache(
    const Aligned& model, const std::string& root, const std::vector<std::string>& volume_paths,
    int64_t error_budget, RunLog& log, std::set<std::string>* failed) {
    std::map<std::string, Tensor<float>> cache;
    int64_t errors = 0;
    for (const auto& vp : volume_paths) {
        try {
            Grid<float> g = load_grid(root, vp, model.cfg);
            Tensor<float> patches = patchify<float>({g}, model.cfg.vit.patch_size);
            cache[vp] = model.encoder->encode(patches).values.val();
        } catch (const FormatError& e) {
            ++errors;
            if (failed) failed->insert(vp);
            log.line({{"event", "volume_error"}, {"volume", vp}, {"error", e.what()}});
            if (errors > error_budget)
                throw FormatError("sft: volume error budget exceeded (" + std::to_string(errors) +
                                  " failures), last: " + e.what());
        }
    }
    return cache;
}

double run_sft_epochs(Aligned& model, const Dataset& data, int stage, RunLog& log) {
    const RunConfig& cfg = model.cfg;
    const int64_t b_size = cfg.train.batch_size;

    // stage-specific trainable set; everything else must stay bit-identical
    auto trainable_pred = [stage](const std::string& name) {
        if (name.rfind("perceiver.", 0) == 0) return true;
        if (stage == 2 && name.find(".lora_") != std::string::npos) return true;
        return false;
    };
    model.head.set_trainable(trainable_pred);
    std::vector<Var<float>> trainable = model.head.matching(trainable_pred);

    // frozen snapshot for the freeze contract check at the end
    std::vector<std::pair<std::string, std::vector<float>>> frozen;
    for (auto& [name, v] : model.head.entries())
        if (!trainable_pred(name)) frozen.push_back({name, v.val().data});
    auto encoder_before = model.encoder->params().snapshot();

    std::set<std::string> failed;
    auto cache = build_encoder_cache(model, data.root, unique_volume_paths(data.train),
                                     cfg.train.error_budget, log, &failed);

    std::vector<size_t> usable;
    for (size_t i = 0; i < data.train.size(); ++i)
        if (!failed.count(data.train[i].volume_path)) usable.push_back(i);
    if (usable.empty()) throw FormatError("sft: no usable training samples");

    AdamConfig adam_cfg;
    adam_cfg.lr = stage == 1 ? cfg.train.sft_stage1_lr : cfg.train.sft_stage2_lr;
    adam_cfg.lr_decay = cfg.train.lr_decay;
    Adam<float> opt(trainable, adam_cfg);
    Rng run_rng = Rng(cfg.train.seed).derive(stage == 1 ? 0xf71 : 0xf72);

    const int64_t n = model.cfg.vit.grid().count();
    const int64_t c = model.cfg.vit.embed_dim;
    int64_t step = 0;
    double last_loss = 0;
    for (int64_t epoch = 0; epoch < cfg.train.sft_epochs; ++epoch) {
        opt.set_epoch(epoch);
        std::vector<size_t> order = usable;
        run_rng.shuffle(order);
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(b_size)) {
            size_t take = std::min<size_t>(static_cast<size_t>(b_size), order.size() - pos);
            Tensor<float> image({static_cast<int64_t>(take), n, c});
            std::vector<LmSample> batch;
            for (size_t i = 0; i < take; ++i) {
                const InstructionSample& s = data.train[order[pos + i]];
                const Tensor<float>& enc = cache.at(s.volume_path);
                std::copy_n(enc.ptr(), n * c, image.ptr() + static_cast<int64_t>(i) * n * c);
                batch.push_back({model.vocab.encode(s.question), model.vocab.encode(s.answer)});
            }
            TokenBatch<float> perceived = model.perceive(image);
            Rng* dropout_rng = stage == 2 ? &run_rng : nullptr;
            auto res = lm_forward(*model.lm, perceived.values, batch, dropout_rng);
            opt.zero_grad();
            backward(res.loss);
            opt.step();
            ++step;
            last_loss = res.loss.val().data[0];
            log.line({{"step", step}, {"loss", last_loss}, {"lr", opt.lr()}});
        }
    }

    for (auto& [name, before] : frozen)
        if (model.head.get(name).val().data != before)
            throw std::logic_error("sft: frozen parameter " + name + " changed during stage " +
                                   std::to_string(stage));
    auto encoder_after = model.encoder->params().snapshot();
    for (size_t i = 0; i < encoder_before.size(); ++i)
        if (encoder_after[i].second.data != encoder_before[i].second.data)
            throw std::logic_error("sft: encoder parameter " + encoder_before[i].first +
                                   " changed during stage " + std::to_string(stage));
    return last_loss;
}

std::string render_metric_table(const std::vector<std::pair<std::string, ordered_json>>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(16) << "perceiver" << std::right << std::setw(9) << "bleu1"
       << std::setw(9) << "rouge1" << std::setw(14) << "meteor_exact" << std::setw(10)
       << "token_f1" << "\n";
    for (auto& [kind, m] : rows) {
        os << std::left << std::setw(16) << kind << std::right << std::fixed
           << std::setprecision(2) << std::setw(9) << m["bleu1"].get<double>() << std::setw(9)
           << m["rouge1"].get<double>() << std::setw(14) << m["meteor_exact"].get<double>()
           << std::setw(10) << m["token_f1"].get<double>() << "\n";
    }
    return os.str();
}

} // namespace

std::string shapes_report(const RunConfig& cfg) {
    cfg.validate();
    PatchGrid grid = cfg.vit.grid();
    const int64_t n = grid.count();
    const int64_t m = cfg.perceiver.out_tokens(grid.dims);
    auto out_grid = cfg.perceiver.out_grid(grid.dims);
    std::ostringstream os;
    os << "input dims:      " << cfg.vit.input_dims[0] << "x" << cfg.vit.input_dims[1] << "x"
       << cfg.vit.input_dims[2] << "\n";
    os << "patch size:      " << cfg.vit.patch_size[0] << "x" << cfg.vit.patch_size[1] << "x"
       << cfg.vit.patch_size[2] << "\n";
    os << "patch grid:      " << grid.dims[0] << "x" << grid.dims[1] << "x" << grid.dims[2]
       << "\n";
    os << "encoder tokens:  " << n << " (dim " << cfg.vit.embed_dim << ")\n";
    os << "perceiver:       " << to_string(cfg.perceiver.kind) << " k=" << cfg.perceiver.k
       << " -> grid " << out_grid[0] << "x" << out_grid[1] << "x" << out_grid[2] << "\n";
    os << "tokens:          " << n << " -> " << m << " (dim " << cfg.perceiver.out_channels
       << ")\n";
    os << "lm prefix:       " << m << " of max_seq_len " << cfg.lm.max_seq_len << "\n";
    return os.str();
}

DatasetSummary gen_data(const RunConfig& cfg, const std::string& out_dir, int64_t n_volumes,
                        uint64_t seed, const std::optional<std::array<int64_t, 3>>& dims,
                        bool force) {
    cfg.validate();
    PhantomParams params = cfg.phantom;
    if (dims) params.base_dims = *dims;
    return write_phantom_dataset(out_dir, n_volumes, seed, params, cfg.train.test_fraction,
                                 cfg.threads, force);
}

void pretrain_mae(const RunConfig& cfg, const std::string& data_dir, const std::string& out_ckpt,
                  const std::string& log_path, int64_t steps_override) {
    cfg.validate();
    Dataset data = load_dataset(data_dir);
    std::vector<std::string> volumes = unique_volume_paths(data.train);
    const int64_t total_steps = steps_override > 0 ? steps_override : cfg.train.mae_steps;

    RunLog log(log_path);
    log.line({{"event", "start"},
              {"cmd", "pretrain-mae"},
              {"config_hash", cfg.hash_hex()},
              {"seed", cfg.train.seed},
              {"volumes", volumes.size()},
              {"steps", total_steps}});

    Mae<float> model(cfg.vit, cfg.train.seed);
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.train.mae_lr;
    adam_cfg.lr_decay = cfg.train.lr_decay;
    Adam<float> opt(model.params().all(), adam_cfg);
    Rng run_rng = Rng(cfg.train.seed).derive(0xae0);

    int64_t step = 0;
    for (int64_t epoch = 0; step < total_steps; ++epoch) {
        opt.set_epoch(epoch);
        std::vector<std::string> order = volumes;
        run_rng.shuffle(order);
        for (size_t pos = 0; pos < order.size() && step < total_steps;
             pos += static_cast<size_t>(cfg.train.batch_size)) {
            size_t take = std::min<size_t>(static_cast<size_t>(cfg.train.batch_size),
                                           order.size() - pos);
            std::vector<Grid<float>> grids;
            for (size_t i = 0; i < take; ++i)
                grids.push_back(load_grid(data.root, order[pos + i], cfg));
            Tensor<float> patches = patchify(grids, cfg.vit.patch_size);
            auto res = model.forward_mae(patches, run_rng);
            opt.zero_grad();
            backward(res.loss);
            opt.step();
            ++step;
            log.line({{"step", step},
                      {"loss", static_cast<double>(res.loss.val().data[0])},
                      {"lr", opt.lr()}});
        }
    }

    Checkpoint ck;
    stamp_meta(ck, kSchemaMae, cfg);
    for (auto& [name, t] : model.params().snapshot()) ck.put(name, t);
    ck.save(out_ckpt);
    log.line({{"event", "done"}, {"ckpt", out_ckpt}});
}

void sft(const RunConfig& cfg, const std::string& data_dir, int stage, const std::string& in_ckpt,
         const std::string& out_ckpt, const std::string& log_path) {
    cfg.validate();
    if (stage != 1 && stage != 2) throw ConfigError("sft: stage must be 1 or 2");
    Dataset data = load_dataset(data_dir);

    // the vocabulary comes from the training corpus of this dataset
    std::vector<std::string> corpus;
    for (const auto& s : data.train) {
        if (!s.question.empty()) corpus.push_back(s.question);
        corpus.push_back(s.answer);
    }
    Vocab vocab = Vocab::build(corpus, cfg.train.vocab_min_count);

    Checkpoint in = Checkpoint::load(in_ckpt);
    std::unique_ptr<Aligned> model;
    if (stage == 1) {
        require_schema(in, {kSchemaMae});
        check_vit_meta(in, cfg);
        model = std::make_unique<Aligned>(cfg, vocab, false);
        model->encoder->params().restore(in.as_table());
    } else {
        require_schema(in, {kSchemaSft1});
        check_vit_meta(in, cfg);
        check_perceiver_meta(in, cfg);
        if (in.get_meta_str("meta.vocab_hash") != std::to_string(vocab.fingerprint()))
            throw CheckpointError("sft: vocab hash mismatch between stage-1 checkpoint and " +
                                  data_dir);
        model = std::make_unique<Aligned>(cfg, vocab, true);
        auto table = in.as_table();
        model->encoder->params().restore(table);
        // the stage-1 table lacks the fresh lora entries; restore the rest
        model->head.restore_filtered(
            table, [](const std::string& name) { return name.find(".lora_") == std::string::npos; });
    }

    RunLog log(log_path);
    log.line({{"event", "start"},
              {"cmd", "sft"},
              {"stage", stage},
              {"config_hash", cfg.hash_hex()},
              {"seed", cfg.train.seed},
              {"train_samples", data.train.size()}});
    double final_loss = run_sft_epochs(*model, data, stage, log);
    model->save(out_ckpt, stage == 1 ? kSchemaSft1 : kSchemaSft2, stage);
    log.line({{"event", "done"}, {"ckpt", out_ckpt}, {"final_loss", final_loss}});
}

std::string generate_text(const RunConfig& cfg, const std::string& ckpt,
                          const std::string& volume_path, const std::string& prompt,
                          int64_t max_new_tokens) {
    cfg.validate();
    auto model = load_aligned(ckpt, cfg);
    Grid<float> g = load_grid(".", volume_path, cfg);
    Tensor<float> patches = patchify<float>({g}, cfg.vit.patch_size);
    Tensor<float> enc = model->encoder->encode(patches).values.val();
    TokenBatch<float> perceived = model->perceive(enc);
    std::vector<int64_t> ids = model->vocab.encode(prompt);
    int64_t budget = max_new_tokens > 0 ? max_new_tokens : cfg.train.max_new_tokens;
    std::vector<int64_t> out = lm_generate(*model->lm, perceived.values, ids, budget);
    return model->vocab.decode(out);
}

void evaluate(const RunConfig& cfg, const std::string& ckpt, const std::string& data_dir,
              const std::string& task, const std::string& report_path) {
    cfg.validate();
    if (task != "report" && task != "vqa" && task != "diagnosis")
        throw ConfigError("eval: task must be report, vqa or diagnosis");
    auto model = load_aligned(ckpt, cfg);

    Dataset data = load_dataset(data_dir);
    if (data.test.empty()) throw FormatError("eval: " + data_dir + " has no test.jsonl samples");
    std::vector<InstructionSample> samples;
    for (const auto& s : data.test)
        if (s.task == task) samples.push_back(s);
    if (samples.empty()) throw FormatError("eval: no test samples with task " + task);

    RunLog log(report_path.empty() ? "" : report_path + ".log.jsonl");
    log.line({{"event", "start"},
              {"cmd", "eval"},
              {"task", task},
              {"config_hash", cfg.hash_hex()},
              {"seed", cfg.train.seed},
              {"n", samples.size()}});

    std::set<std::string> failed;
    auto cache = build_encoder_cache(*model, data.root, unique_volume_paths(samples),
                                     cfg.train.error_budget, log, &failed);

    ordered_json per_sample = ordered_json::array();
    std::vector<Polarity> preds;
    std::vector<bool> labels;
    double sum_bleu = 0, sum_rouge = 0, sum_meteor = 0, sum_f1 = 0;
    int64_t n_scored = 0;
    for (const auto& s : samples) {
        if (failed.count(s.volume_path)) continue;
        TokenBatch<float> perceived = model->perceive(cache.at(s.volume_path));
        std::vector<int64_t> prompt = model->vocab.encode(s.question);
        std::vector<int64_t> out =
            lm_generate(*model->lm, perceived.values, prompt, cfg.train.max_new_tokens);
        std::string text = model->vocab.decode(out);
        ++n_scored;

        ordered_json row;
        row["id"] = s.id;
        row["prediction"] = text;
        row["reference"] = s.answer;
        if (task == "diagnosis") {
            if (!s.label) throw FormatError("eval: diagnosis sample " + s.id + " lacks a label");
            Polarity p = parse_diagnosis_answer(text);
            preds.push_back(p);
            labels.push_back(s.label->second);
            row["disease"] = s.label->first;
            row["label"] = s.label->second;
            row["parsed"] = p == Polarity::Positive ? "positive"
                            : p == Polarity::Negative ? "negative"
                                                      : "unknown";
        } else {
            double b = bleu1(text, s.answer), r = rouge1(text, s.answer),
                   m = meteor_exact(text, s.answer), f = token_f1(text, s.answer);
            sum_bleu += b;
            sum_rouge += r;
            sum_meteor += m;
            sum_f1 += f;
            row["bleu1"] = 100.0 * b;
            row["rouge1"] = 100.0 * r;
            row["meteor_exact"] = 100.0 * m;
            row["token_f1"] = 100.0 * f;
        }
        per_sample.push_back(std::move(row));
    }
    if (n_scored == 0) throw FormatError("eval: every sample failed to load");

    ordered_json report;
    report["task"] = task;
    report["n"] = n_scored;
    report["seed"] = cfg.train.seed;
    report["config_hash"] = cfg.hash_hex();
    ordered_json metrics;
    if (task == "diagnosis") {
        ClassificationMetrics m = classification_metrics(preds, labels);
        metrics["bacc"] = 100.0 * m.bacc;
        metrics["precision"] = 100.0 * m.precision;
        metrics["recall"] = 100.0 * m.recall;
        metrics["f1"] = 100.0 * m.f1;
        metrics["counts"] = {{"tp", m.counts.tp}, {"fp", m.counts.fp}, {"tn", m.counts.tn},
                             {"fn", m.counts.fn}};
    } else {
        metrics["bleu1"] = 100.0 * sum_bleu / n_scored;
        metrics["rouge1"] = 100.0 * sum_rouge / n_scored;
        metrics["meteor_exact"] = 100.0 * sum_meteor / n_scored;
        metrics["token_f1"] = 100.0 * sum_f1 / n_scored;
    }
    report["metrics"] = metrics;
    report["per_sample"] = per_sample;

    std::ofstream os(report_path, std::ios::trunc);
    if (!os) throw FormatError("eval: cannot write " + report_path);
    os << report.dump(2) << '\n';
    log.line({{"event", "done"}, {"report", report_path}});
}

std::string ablate(const RunConfig& cfg, const std::string& data_dir, const std::string& mae_ckpt,
                   const std::string& out_json, const std::string& work_dir) {
    cfg.validate();
    fs::create_directories(work_dir);
    std::vector<std::pair<std::string, ordered_json>> rows;
    for (PerceiverKind kind :
         {PerceiverKind::GlobalQformer, PerceiverKind::LocalQformer, PerceiverKind::MlpMixer,
          PerceiverKind::AvgPool, PerceiverKind::MaxPool, PerceiverKind::Conv3D}) {
        RunConfig run = cfg;
        run.perceiver.kind = kind;
        std::string tag = to_string(kind);
        std::string s1 = work_dir + "/" + tag + ".stage1.vckp";
        std::string s2 = work_dir + "/" + tag + ".stage2.vckp";
        std::string rep = work_dir + "/" + tag + ".report.json";
        sft(run, data_dir, 1, mae_ckpt, s1, work_dir + "/" + tag + ".stage1.log.jsonl");
        sft(run, data_dir, 2, s1, s2, work_dir + "/" + tag + ".stage2.log.jsonl");
        evaluate(run, s2, data_dir, "vqa", rep);
        std::ifstream is(rep);
        ordered_json report = ordered_json::parse(is);
        ordered_json row = report["metrics"];
        row["n"] = report["n"];
        rows.push_back({tag, row});
    }

    ordered_json out;
    out["task"] = "vqa";
    out["config_hash"] = cfg.hash_hex();
    out["seed"] = cfg.train.seed;
    ordered_json jrows = ordered_json::array();
    for (auto& [kind, m] : rows) {
        ordered_json r;
        r["perceiver"] = kind;
        r["bleu1"] = m["bleu1"];
        r["rouge1"] = m["rouge1"];
        r["meteor_exact"] = m["meteor_exact"];
        r["token_f1"] = m["token_f1"];
        r["n"] = m["n"];
        jrows.push_back(std::move(r));
    }
    out["rows"] = jrows;
    std::ofstream os(out_json, std::ios::trunc);
    if (!os) throw FormatError("ablate: cannot write " + out_json);
    os << out.dump(2) << '\n';
    return render_metric_table(rows);
}

} // namespace voxlm::pipeline
