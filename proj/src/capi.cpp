#include "cotprune/cotprune.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "cotprune/config.hpp"
#include "runner.hpp"

using cotprune::Error;
using cotprune::ErrorKind;

struct cp_config {
  cotprune::config::AppConfig value;
};

struct cp_pruner {
  std::unique_ptr<cotprune::runner::Pruner> value;
};

namespace {

thread_local std::string g_last_error;

cp_status status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return CP_ERR_IO;
    case ErrorKind::parse: return CP_ERR_PARSE;
    case ErrorKind::invalid: return CP_ERR_INVALID;
    case ErrorKind::transport: return CP_ERR_TRANSPORT;
    case ErrorKind::malformed: return CP_ERR_TRANSPORT;
    case ErrorKind::budget: return CP_ERR_BUDGET;
    case ErrorKind::config: return CP_ERR_CONFIG;
    case ErrorKind::internal: return CP_ERR_INTERNAL;
  }
  return CP_ERR_INTERNAL;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <typename Fn>
cp_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    return fn();
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CP_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return CP_ERR_INTERNAL;
  }
}

std::vector<std::string> split_csv(const char* csv) {
  std::vector<std::string> out;
  if (!csv) return out;
  std::stringstream ss{std::string(csv)};
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto t = cotprune::trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

}  // namespace

extern "C" {

const char* cp_version(void) { return "0.1.0"; }

const char* cp_last_error(void) { return g_last_error.c_str(); }

void cp_string_free(char* s) { std::free(s); }

cp_status cp_config_default(cp_config** out) {
  return guarded([&]() -> cp_status {
    if (!out) return CP_ERR_INVALID;
    *out = new cp_config{cotprune::config::default_config()};
    return CP_OK;
  });
}

cp_status cp_config_load(const char* path, cp_config** out) {
  return guarded([&]() -> cp_status {
    if (!path || !out) return CP_ERR_INVALID;
    *out = new cp_config{cotprune::config::load_config(path)};
    return CP_OK;
  });
}

cp_status cp_config_parse(const char* json_text, cp_config** out) {
  return guarded([&]() -> cp_status {
    if (!json_text || !out) return CP_ERR_INVALID;
    *out = new cp_config{cotprune::config::parse_config_json(json_text)};
    return CP_OK;
  });
}

cp_status cp_config_override(cp_config* cfg, const char* dotted_key,
                             const char* value) {
  return guarded([&]() -> cp_status {
    if (!cfg || !dotted_key || !value) return CP_ERR_INVALID;
    cotprune::config::apply_override(cfg->value, dotted_key, value);
    return CP_OK;
  });
}

cp_status cp_config_dump(const cp_config* cfg, char** json_out) {
  return guarded([&]() -> cp_status {
    if (!cfg || !json_out) return CP_ERR_INVALID;
    *json_out = dup_string(cotprune::config::to_json_text(cfg->value));
    return CP_OK;
  });
}

void cp_config_free(cp_config* cfg) { delete cfg; }

cp_status cp_run_prepare(const cp_config* cfg, const char* resume_manifest,
                         char** summary_out) {
  return guarded([&]() -> cp_status {
    if (!cfg) return CP_ERR_INVALID;
    const std::string summary = cotprune::runner::run_prepare(
        cfg->value, resume_manifest ? resume_manifest : "");
    if (summary_out) *summary_out = dup_string(summary);
    return CP_OK;
  });
}

cp_status cp_run_train(const cp_config* cfg, const char* resume_path,
                       char** summary_out) {
  return guarded([&]() -> cp_status {
    if (!cfg) return CP_ERR_INVALID;
    const std::string summary =
        cotprune::runner::run_train(cfg->value, resume_path ? resume_path : "");
    if (summary_out) *summary_out = dup_string(summary);
    return CP_OK;
  });
}

cp_status cp_run_eval(const cp_config* cfg, const char* methods_csv,
                      double floor, char** table_out, char** summary_out) {
  return guarded([&]() -> cp_status {
    if (!cfg) return CP_ERR_INVALID;
    const auto outcome =
        cotprune::runner::run_eval(cfg->value, split_csv(methods_csv), floor);
    if (table_out) *table_out = dup_string(outcome.table);
    if (summary_out) *summary_out = dup_string(outcome.summary_json);
    if (outcome.floor_failed) {
      g_last_error = "eval accuracy fell below the configured floor";
      return CP_ERR_FLOOR;
    }
    return CP_OK;
  });
}

cp_status cp_pruner_open(const cp_config* cfg, const char* checkpoint,
                         cp_pruner** out) {
  return guarded([&]() -> cp_status {
    if (!cfg || !out) return CP_ERR_INVALID;
    auto pruner = cotprune::runner::open_pruner(cfg->value,
                                                checkpoint ? checkpoint : "");
    *out = new cp_pruner{std::move(pruner)};
    return CP_OK;
  });
}

cp_status cp_pruner_prune(const cp_pruner* pruner, const char* question,
                          char** prompt_out) {
  return guarded([&]() -> cp_status {
    if (!pruner || !question || !prompt_out) return CP_ERR_INVALID;
    *prompt_out = dup_string(
        cotprune::runner::prune_question(*pruner->value, question));
    return CP_OK;
  });
}

void cp_pruner_free(cp_pruner* pruner) { delete pruner; }

}  // extern "C"
