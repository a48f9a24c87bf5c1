// Command-line front end. Talks to the library exclusively through the C API.
#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stpnet.h"

namespace {

[[noreturn]] void die(const char* where, stpnet_status st) {
  std::fprintf(stderr, "error: %s failed (status %d): %s\n", where, int(st),
               stpnet_last_error());
  std::exit(1);
}

void check(const char* where, stpnet_status st) {
  if (st != STPNET_OK) die(where, st);
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    std::fprintf(stderr, "error: cannot read config file %s\n", path.c_str());
    std::exit(1);
  }
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Shared config/override options. The effective config is the file's text
// (if any) with one "key value" line appended per explicitly-set flag;
// later lines win, so command-line flags override the file.
struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  uint64_t seed_value = 0;  // last --seed, when given
  bool seed_given = false;

  void attach(CLI::App* cmd, bool with_train_flags) {
    cmd->add_option("--config", config_path, "run configuration file");
    auto num = [this, cmd](const std::string& flag, const std::string& key,
                           const std::string& help) {
      auto value = std::make_shared<double>();
      cmd->add_option(flag, *value, help)->each([this, key, value](const std::string&) {
        overrides.push_back(key + " " + std::to_string(*value));
      });
    };
    auto toggle = [this, cmd](const std::string& flag, const std::string& key,
                              const std::string& help) {
      cmd->add_flag_callback(
          flag, [this, key] { overrides.push_back(key + " 1"); }, help);
    };
    cmd->add_option("--seed", seed_value, "run seed")
        ->each([this](const std::string&) {
          seed_given = true;
          overrides.push_back("seed " + std::to_string(seed_value));
        });
    if (with_train_flags) {
      toggle("--no-text", "no_text", "zero the injected text grids");
      toggle("--no-ssm", "no_ssm", "bypass the multi-scale residual blocks");
      toggle("--no-utrans-text", "no_utrans_text",
             "run attention without text tokens");
      toggle("--teacher-force-text", "teacher_force_text",
             "inject ground-truth phrases instead of retrieved ones");
      toggle("--swap-loc-order", "swap_loc_order",
             "swap the left/right recombination order");
      num("--lambda1", "lambda1", "segmentation loss weight");
      num("--lambda2", "lambda2", "retrieval loss weight");
      num("--lambda3", "lambda3", "focal loss weight");
      num("--tau", "tau", "retrieval softmax temperature");
      num("--lr", "lr", "learning rate");
      num("--batch", "batch", "batch size");
      num("--epochs", "epochs", "max epochs");
      num("--patience", "patience", "early-stop patience");
    }
  }

  std::string text() const {
    std::string out;
    if (!config_path.empty()) out = read_file(config_path) + "\n";
    for (const std::string& line : overrides) out += line + "\n";
    return out;
  }
};

stpnet_dataset* open_dataset(const std::string& data_path,
                             const std::string& config_text, int split) {
  stpnet_dataset* ds = nullptr;
  if (!data_path.empty()) {
    check("dataset load", stpnet_dataset_load(data_path.c_str(), &ds));
  } else {
    check("dataset synthesis",
          stpnet_dataset_split(config_text.c_str(), split, &ds));
  }
  return ds;
}

std::vector<float> fetch_image(stpnet_dataset* ds, int64_t index) {
  int64_t s = stpnet_dataset_image_size(ds);
  std::vector<float> image(size_t(s * s));
  check("dataset sample",
        stpnet_dataset_sample(ds, index, image.data(), nullptr, nullptr));
  return image;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"text-prompt-guided lesion segmentation toolkit"};
  app.require_subcommand(1);

  // ---- gen ----
  auto* gen = app.add_subcommand("gen", "synthesize a dataset file");
  ConfigArgs gen_cfg;
  gen_cfg.attach(gen, false);
  std::string gen_out;
  int64_t gen_first = 0, gen_count = -1;
  std::string gen_split = "";
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->add_option("--first", gen_first, "first global sample index");
  gen->add_option("--count", gen_count, "number of samples");
  gen->add_option("--split", gen_split, "standard split to synthesize")
      ->check(CLI::IsMember({"train", "val", "test"}));
  gen->callback([&] {
    std::string text = gen_cfg.text();
    stpnet_dataset* ds = nullptr;
    if (!gen_split.empty()) {
      int which = gen_split == "train" ? 0 : gen_split == "val" ? 1 : 2;
      check("dataset synthesis",
            stpnet_dataset_split(text.c_str(), which, &ds));
    } else {
      if (gen_count < 0) {
        std::fprintf(stderr, "error: need --count or --split\n");
        std::exit(1);
      }
      // raw ranges take their master seed from --seed (default 0)
      check("dataset synthesis",
            stpnet_dataset_generate(text.c_str(), gen_cfg.seed_value,
                                    gen_first, gen_count, &ds));
    }
    check("dataset save", stpnet_dataset_save(ds, gen_out.c_str()));
    std::printf("wrote %lld samples to %s\n",
                static_cast<long long>(stpnet_dataset_size(ds)),
                gen_out.c_str());
    stpnet_dataset_free(ds);
  });

  // ---- train ----
  auto* train = app.add_subcommand("train", "train a model");
  ConfigArgs train_cfg;
  train_cfg.attach(train, true);
  std::string train_out, train_data, val_data, log_path;
  train->add_option("--out", train_out, "checkpoint output path")->required();
  train->add_option("--train-data", train_data,
                    "training dataset file (synthesized when omitted)");
  train->add_option("--val-data", val_data,
                    "validation dataset file (synthesized when omitted)");
  train->add_option("--log", log_path, "write the epoch log to this file");
  train->callback([&] {
    std::string text = train_cfg.text();
    stpnet_dataset* tr = open_dataset(train_data, text, 0);
    stpnet_dataset* va = open_dataset(val_data, text, 1);
    stpnet_model* model = nullptr;
    char* log = nullptr;
    check("training", stpnet_train(text.c_str(), tr, va, &model, &log));
    std::printf("%s", log);
    if (!log_path.empty()) {
      std::ofstream os(log_path, std::ios::trunc);
      os << log;
    }
    stpnet_string_free(log);
    check("checkpoint save", stpnet_model_save(model, train_out.c_str()));
    std::printf("saved checkpoint to %s\n", train_out.c_str());
    stpnet_model_free(model);
    stpnet_dataset_free(va);
    stpnet_dataset_free(tr);
  });

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  ConfigArgs eval_cfg;
  eval_cfg.attach(eval, false);
  std::string eval_ckpt, eval_data, eval_split = "test";
  eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  eval->add_option("--data", eval_data,
                   "dataset file (test split synthesized when omitted)");
  eval->add_option("--split-name", eval_split, "split label for the report");
  eval->callback([&] {
    std::string text = eval_cfg.text();
    stpnet_model* model = nullptr;
    check("checkpoint load", stpnet_model_load(eval_ckpt.c_str(), &model));
    stpnet_dataset* ds = open_dataset(eval_data, text, 2);
    char* report = nullptr;
    check("evaluation",
          stpnet_evaluate(model, ds, eval_split.c_str(), nullptr, &report));
    std::printf("%s", report);
    stpnet_string_free(report);
    stpnet_dataset_free(ds);
    stpnet_model_free(model);
  });

  // ---- retrieve ----
  auto* retrieve =
      app.add_subcommand("retrieve", "show phrase retrieval for one sample");
  ConfigArgs ret_cfg;
  ret_cfg.attach(retrieve, false);
  std::string ret_ckpt, ret_data;
  int64_t ret_index = 0;
  retrieve->add_option("--ckpt", ret_ckpt, "checkpoint path")->required();
  retrieve->add_option("--data", ret_data,
                       "dataset file (test split synthesized when omitted)");
  retrieve->add_option("--index", ret_index, "sample index");
  retrieve->callback([&] {
    std::string text = ret_cfg.text();
    stpnet_model* model = nullptr;
    check("checkpoint load", stpnet_model_load(ret_ckpt.c_str(), &model));
    stpnet_dataset* ds = open_dataset(ret_data, text, 2);
    std::vector<float> image = fetch_image(ds, ret_index);
    int32_t gt[4] = {0, 0, 0, 0};
    check("dataset sample",
          stpnet_dataset_sample(ds, ret_index, nullptr, nullptr, gt));
    double scores[32];
    int32_t picked[4];
    check("prediction",
          stpnet_predict(model, image.data(), nullptr, scores, picked));
    const char* cat_names[4] = {"infection", "num", "left_loc", "right_loc"};
    const int cat_sizes[4] = {2, 2, 8, 8};
    for (int c = 0; c < 4; ++c) {
      char phrase[128];
      check("phrase lookup",
            stpnet_phrase(model, c, picked[c], phrase, sizeof phrase));
      std::printf("%-10s retrieved %d (gt %d): \"%s\"\n", cat_names[c],
                  picked[c], gt[c], phrase);
      for (int j = 0; j < cat_sizes[c]; ++j)
        std::printf("    score[%d] = %.4f\n", j, scores[c * 8 + j]);
    }
    stpnet_dataset_free(ds);
    stpnet_model_free(model);
  });

  // ---- gradcheck ----
  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient suite");
  int64_t gc_size = 32, gc_coords = 120;
  uint64_t gc_seed = 0;
  std::string gc_corrupt;
  gradcheck->add_option("--image-size", gc_size, "reduced image size");
  gradcheck->add_option("--coords", gc_coords, "coordinates per check");
  gradcheck->add_option("--seed", gc_seed, "sampling seed");
  gradcheck->add_option("--corrupt", gc_corrupt,
                        "negative control: sabotage this check's gradients");
  gradcheck->callback([&] {
    int ok = 0;
    char* report = nullptr;
    check("gradient suite",
          stpnet_gradcheck(gc_size, gc_coords, gc_seed,
                           gc_corrupt.empty() ? nullptr : gc_corrupt.c_str(),
                           &ok, &report));
    std::printf("%s", report);
    stpnet_string_free(report);
    if (!ok) std::exit(1);
  });

  // ---- saliency ----
  auto* saliency =
      app.add_subcommand("saliency", "export decoder activation maps");
  ConfigArgs sal_cfg;
  sal_cfg.attach(saliency, false);
  std::string sal_ckpt, sal_data, sal_out = "saliency";
  int64_t sal_index = 0;
  saliency->add_option("--ckpt", sal_ckpt, "checkpoint path")->required();
  saliency->add_option("--data", sal_data,
                       "dataset file (test split synthesized when omitted)");
  saliency->add_option("--index", sal_index, "sample index");
  saliency->add_option("--out", sal_out, "output file prefix");
  saliency->callback([&] {
    std::string text = sal_cfg.text();
    stpnet_model* model = nullptr;
    check("checkpoint load", stpnet_model_load(sal_ckpt.c_str(), &model));
    stpnet_dataset* ds = open_dataset(sal_data, text, 2);
    std::vector<float> image = fetch_image(ds, sal_index);
    char* files = nullptr;
    check("saliency export",
          stpnet_export_saliency(model, image.data(), sal_out.c_str(),
                                 &files));
    std::printf("%s", files);
    stpnet_string_free(files);
    stpnet_dataset_free(ds);
    stpnet_model_free(model);
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}
