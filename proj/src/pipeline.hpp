#pragma once

#include <optional>

#include "config.hpp"

namespace voxlm::pipeline {

// weights-free token ledger for the active config
std::string shapes_report(const RunConfig& cfg);

DatasetSummary gen_data(const RunConfig& cfg, const std::string& out_dir, int64_t n_volumes,
                        uint64_t seed, const std::optional<std::array<int64_t, 3>>& dims,
                        bool force);

// 3-D MAE pretraining over the train-split volumes; writes a VCKP checkpoint
// and a line-JSON log. steps_override < 0 uses the config value.
void pretrain_mae(const RunConfig& cfg, const std::string& data_dir, const std::string& out_ckpt,
                  const std::string& log_path, int64_t steps_override = -1);

// Two-stage alignment. Stage 1 consumes the MAE checkpoint and trains the
// perceiver only; stage 2 consumes a stage-1 checkpoint and trains perceiver
// plus LoRA adapters. Checkpoints are self-contained (encoder, head, vocab).
void sft(const RunConfig& cfg, const std::string& data_dir, int stage, const std::string& in_ckpt,
         const std::string& out_ckpt, const std::string& log_path);

std::string generate_text(const RunConfig& cfg, const std::string& ckpt,
                          const std::string& volume_path, const std::string& prompt,
                          int64_t max_new_tokens = -1);

// Runs generation over data_dir/test.jsonl for one task and writes
// report.json. task is one of report | vqa | diagnosis.
void evaluate(const RunConfig& cfg, const std::string& ckpt, const std::string& data_dir,
              const std::string& task, const std::string& report_path);

// Runs both SFT stages plus a VQA evaluation for every perceiver kind and
// writes a comparison table. Returns the rendered text table.
std::string ablate(const RunConfig& cfg, const std::string& data_dir, const std::string& mae_ckpt,
                   const std::string& out_json, const std::string& work_dir);

} // namespace voxlm::pipeline
