#include "stpnet.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "stpnet/checkpoint.hpp"
#include "stpnet/config.hpp"
#include "stpnet/gradchecks.hpp"
#include "stpnet/saliency.hpp"
#include "stpnet/train.hpp"

using namespace stpnet;

struct stpnet_model {
  StpnetModel<float> model;
  TextBank phrases;
  EncodedBank bank;
};

struct stpnet_dataset {
  Dataset ds;
};

namespace {

thread_local std::string g_last_error;

template <typename Fn>
stpnet_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return STPNET_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return stpnet_status(int(e.code()));
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return STPNET_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return STPNET_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  require(p != nullptr, Status::Internal, "out of memory");
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

RunConfig parse_config_arg(const char* config_text) {
  return parse_run_config(config_text ? config_text : "");
}

stpnet_model* wrap_model(StpnetModel<float>&& m, EncodedBank&& bank) {
  auto* h = new stpnet_model{std::move(m), {}, std::move(bank)};
  h->phrases = build_text_bank(h->model.cfg.domain);
  return h;
}

// Forward one image through an eval-mode pass.
StpnetOutput<float> predict_one(stpnet_model* m, const float* image,
                                Tape<float>& tape) {
  int64_t s = m->model.cfg.image_size;
  Tensor<float> img = Tensor<float>::zeros({1, 1, s, s});
  for (int64_t i = 0; i < s * s; ++i) img[i] = image[i];
  Ctx<float> ctx(tape, m->model.ps, /*training=*/false);
  return stpnet_forward(m->model, ctx, img, m->bank);
}

}  // namespace

extern "C" {

const char* stpnet_last_error(void) { return g_last_error.c_str(); }

const char* stpnet_version(void) { return "1.0.0"; }

void stpnet_string_free(char* s) { std::free(s); }

/* ---- datasets ---------------------------------------------------------- */

stpnet_status stpnet_dataset_generate(const char* config_text,
                                      uint64_t master_seed, int64_t first,
                                      int64_t count, stpnet_dataset** out) {
  return guarded([&] {
    require(out != nullptr, Status::InvalidArgument, "out must not be NULL");
    RunConfig rc = parse_config_arg(config_text);
    *out = new stpnet_dataset{
        generate_range(master_seed, first, count, rc.gen)};
  });
}

stpnet_status stpnet_dataset_split(const char* config_text, int which,
                                   stpnet_dataset** out) {
  return guarded([&] {
    require(out != nullptr, Status::InvalidArgument, "out must not be NULL");
    require(which >= 0 && which <= 2, Status::InvalidArgument,
            "split selector must be 0 (train), 1 (val), or 2 (test)");
    RunConfig rc = parse_config_arg(config_text);
    DataSplits splits = generate_split(rc.train.seed, rc.n_train, rc.n_val,
                                       rc.n_test, rc.gen);
    Dataset* pick[3] = {&splits.train, &splits.val, &splits.test};
    *out = new stpnet_dataset{std::move(*pick[which])};
  });
}

stpnet_status stpnet_dataset_load(const char* path, stpnet_dataset** out) {
  return guarded([&] {
    require(path != nullptr && out != nullptr, Status::InvalidArgument,
            "path and out must not be NULL");
    *out = new stpnet_dataset{load_dataset(path)};
  });
}

stpnet_status stpnet_dataset_save(const stpnet_dataset* ds, const char* path) {
  return guarded([&] {
    require(ds != nullptr && path != nullptr, Status::InvalidArgument,
            "dataset and path must not be NULL");
    save_dataset(path, ds->ds);
  });
}

int64_t stpnet_dataset_size(const stpnet_dataset* ds) {
  return ds ? int64_t(ds->ds.samples.size()) : 0;
}

int64_t stpnet_dataset_image_size(const stpnet_dataset* ds) {
  if (!ds || ds->ds.samples.empty()) return 0;
  return ds->ds.samples[0].image.shape[2];
}

stpnet_status stpnet_dataset_sample(const stpnet_dataset* ds, int64_t index,
                                    float* image, uint8_t* mask,
                                    int32_t* labels) {
  return guarded([&] {
    require(ds != nullptr, Status::InvalidArgument, "dataset must not be NULL");
    require(index >= 0 && size_t(index) < ds->ds.samples.size(),
            Status::InvalidArgument, "sample index out of range");
    const SegSample& s = ds->ds.samples[size_t(index)];
    if (image)
      for (int64_t i = 0; i < s.image.size(); ++i) image[i] = s.image[i];
    if (mask) std::memcpy(mask, s.mask.data(), s.mask.size());
    if (labels)
      for (int c = 0; c < 4; ++c) labels[c] = s.labels[size_t(c)];
  });
}

void stpnet_dataset_free(stpnet_dataset* ds) { delete ds; }

/* ---- models ------------------------------------------------------------ */

stpnet_status stpnet_model_create(const char* config_text, stpnet_model** out) {
  return guarded([&] {
    require(out != nullptr, Status::InvalidArgument, "out must not be NULL");
    RunConfig rc = parse_config_arg(config_text);
    rc.model.seed = rc.train.seed;
    StpnetModel<float> m = StpnetModel<float>::create(rc.model);
    EncodedBank bank = bank_for_seed(rc.model, rc.model.seed);
    *out = wrap_model(std::move(m), std::move(bank));
  });
}

stpnet_status stpnet_model_load(const char* path, stpnet_model** out) {
  return guarded([&] {
    require(path != nullptr && out != nullptr, Status::InvalidArgument,
            "path and out must not be NULL");
    StpnetModel<float> m = checkpoint_load(path);
    EncodedBank bank = bank_for_seed(m.cfg, m.cfg.seed);
    *out = wrap_model(std::move(m), std::move(bank));
  });
}

stpnet_status stpnet_model_save(const stpnet_model* m, const char* path) {
  return guarded([&] {
    require(m != nullptr && path != nullptr, Status::InvalidArgument,
            "model and path must not be NULL");
    checkpoint_save(m->model, path);
  });
}

int64_t stpnet_model_image_size(const stpnet_model* m) {
  return m ? m->model.cfg.image_size : 0;
}

int64_t stpnet_model_tensor_count(const stpnet_model* m) {
  return m ? int64_t(m->model.ps.size()) : 0;
}

void stpnet_model_free(stpnet_model* m) { delete m; }

/* ---- training and evaluation ------------------------------------------- */

stpnet_status stpnet_train(const char* config_text,
                           const stpnet_dataset* train,
                           const stpnet_dataset* val,
                           stpnet_model** out_model, char** log) {
  return guarded([&] {
    require(train != nullptr && val != nullptr && out_model != nullptr,
            Status::InvalidArgument,
            "train, val, and out_model must not be NULL");
    RunConfig rc = parse_config_arg(config_text);
    TrainResult res = train_model(rc.model, rc.train, train->ds, val->ds);
    if (log) {
      std::string text;
      for (const std::string& w : res.warnings) text += "warning: " + w + "\n";
      for (const EpochRecord& r : res.log)
        text += serialize_epoch_record(r) + "\n";
      *log = dup_string(text);
    }
    *out_model = wrap_model(std::move(res.model), std::move(res.bank));
  });
}

stpnet_status stpnet_evaluate(stpnet_model* m, const stpnet_dataset* ds,
                              const char* split_name, stpnet_metrics* out,
                              char** report) {
  return guarded([&] {
    require(m != nullptr && ds != nullptr, Status::InvalidArgument,
            "model and dataset must not be NULL");
    EvalReport rep = evaluate_model(m->model, m->bank, ds->ds,
                                    split_name ? split_name : "eval");
    if (out) {
      out->n = rep.n;
      out->dice = rep.dice;
      out->iou = rep.iou;
      out->precision = rep.precision;
      out->recall = rep.recall;
      for (int c = 0; c < 4; ++c) out->top1[c] = rep.top1[size_t(c)];
    }
    if (report) *report = dup_string(serialize_report(rep));
  });
}

/* ---- single-image operations -------------------------------------------- */

stpnet_status stpnet_predict(stpnet_model* m, const float* image,
                             uint8_t* mask_out, double* scores_out,
                             int32_t* indices_out) {
  return guarded([&] {
    require(m != nullptr && image != nullptr, Status::InvalidArgument,
            "model and image must not be NULL");
    Tape<float> tape;
    StpnetOutput<float> out = predict_one(m, image, tape);
    if (mask_out) {
      std::vector<uint8_t> pred = binarize_logits(tape.val(out.logits));
      std::memcpy(mask_out, pred.data(), pred.size());
    }
    const RetrievalResult& r = out.retrievals[0];
    if (scores_out) {
      for (int c = 0; c < 4; ++c)
        for (int j = 0; j < 8; ++j)
          scores_out[c * 8 + j] =
              size_t(j) < r.cats[size_t(c)].scores.size()
                  ? r.cats[size_t(c)].scores[size_t(j)]
                  : 0.0;
    }
    if (indices_out)
      for (int c = 0; c < 4; ++c) indices_out[c] = r.cats[size_t(c)].j_star;
  });
}

stpnet_status stpnet_phrase(const stpnet_model* m, int category, int index,
                            char* buf, size_t buf_len) {
  return guarded([&] {
    require(m != nullptr && buf != nullptr && buf_len > 0,
            Status::InvalidArgument, "model and buffer must not be NULL");
    require(category >= 0 && category < 4, Status::InvalidArgument,
            "category must be in 0..3");
    const auto& phrases = m->phrases.categories[size_t(category)];
    require(index >= 0 && size_t(index) < phrases.size(),
            Status::InvalidArgument, "phrase index out of range");
    const std::string& text = phrases[size_t(index)];
    size_t n = std::min(buf_len - 1, text.size());
    std::memcpy(buf, text.data(), n);
    buf[n] = '\0';
  });
}

stpnet_status stpnet_export_saliency(stpnet_model* m, const float* image,
                                     const char* prefix, char** files) {
  return guarded([&] {
    require(m != nullptr && image != nullptr && prefix != nullptr,
            Status::InvalidArgument,
            "model, image, and prefix must not be NULL");
    int64_t s = m->model.cfg.image_size;
    Tensor<float> img = Tensor<float>::zeros({1, 1, s, s});
    for (int64_t i = 0; i < s * s; ++i) img[i] = image[i];
    std::vector<std::string> written =
        export_saliency(m->model, m->bank, img, prefix);
    if (files) {
      std::string joined;
      for (const std::string& w : written) joined += w + "\n";
      *files = dup_string(joined);
    }
  });
}

/* ---- gradient verification ---------------------------------------------- */

stpnet_status stpnet_gradcheck(int64_t image_size, int64_t coords,
                               uint64_t seed, const char* corrupt,
                               int* all_passed, char** report) {
  return guarded([&] {
    SuiteOptions opt;
    opt.image_size = image_size;
    opt.coords = coords;
    opt.seed = seed;
    if (corrupt) opt.corrupt = corrupt;
    std::vector<CheckResult> results = run_gradcheck_suite(opt);
    if (all_passed) *all_passed = all_pass(results) ? 1 : 0;
    if (report) *report = dup_string(serialize_results(results));
  });
}

} /* extern "C" */
