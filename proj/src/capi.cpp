#include "dmvton/dmvton.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>

#include <nlohmann/json.hpp>

#include "dmvton/commands.hpp"
#include "dmvton/errors.hpp"
#include "dmvton/metrics.hpp"
#include "dmvton/nets.hpp"
#include "dmvton/ops.hpp"
#include "dmvton/serve.hpp"
#include "dmvton/weights.hpp"

using nlohmann::json;
using namespace dmvton;

struct dmvton_model {
  std::unique_ptr<nets::TryOnNet> net;
};

struct dmvton_server {
  std::unique_ptr<serve::Server> server;
};

namespace {

thread_local std::string t_last_error;

dmvton_status status_of(Errc c) {
  switch (c) {
    case Errc::kConfig: return DMVTON_ERR_CONFIG;
    case Errc::kData: return DMVTON_ERR_DATA;
    case Errc::kNumeric: return DMVTON_ERR_NUMERIC;
    case Errc::kShape: return DMVTON_ERR_SHAPE;
    case Errc::kUnsupported: return DMVTON_ERR_UNSUPPORTED;
    case Errc::kState: return DMVTON_ERR_STATE;
    case Errc::kInternal: return DMVTON_ERR_INTERNAL;
  }
  return DMVTON_ERR_INTERNAL;
}

// Runs f, translating exceptions into status codes and the thread's message.
template <class F>
dmvton_status guarded(F&& f) {
  t_last_error.clear();
  try {
    f();
    return DMVTON_OK;
  } catch (const Error& e) {
    t_last_error = e.what();
    return status_of(e.code());
  } catch (const json::exception& e) {
    t_last_error = std::string("invalid JSON: ") + e.what();
    return DMVTON_ERR_CONFIG;
  } catch (const std::filesystem::filesystem_error& e) {
    t_last_error = e.what();
    return DMVTON_ERR_DATA;
  } catch (const std::bad_alloc&) {
    t_last_error = "out of memory";
    return DMVTON_ERR_INTERNAL;
  } catch (const std::exception& e) {
    t_last_error = e.what();
    return DMVTON_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_flags(const char* flags_json) {
  if (!flags_json || !*flags_json) return json::object();
  try {
    return json::parse(flags_json);
  } catch (const json::parse_error& e) {
    fail(Errc::kConfig, std::string("flags are not valid JSON: ") + e.what());
  }
}

std::optional<std::filesystem::path> opt_path(const char* p) {
  if (!p || !*p) return std::nullopt;
  return std::filesystem::path(p);
}

// NULL arguments are reported as DMVTON_ERR_ARGUMENT.
template <class F>
dmvton_status checked(std::initializer_list<std::pair<const void*, const char*>> args, F&& f) {
  for (const auto& [p, name] : args)
    if (!p) {
      t_last_error = std::string("argument ") + name + " is NULL";
      return DMVTON_ERR_ARGUMENT;
    }
  return guarded(std::forward<F>(f));
}

}  // namespace

extern "C" {

const char* dmvton_version(void) { return "1.0.0"; }

const char* dmvton_status_name(dmvton_status s) {
  switch (s) {
    case DMVTON_OK: return "ok";
    case DMVTON_ERR_INTERNAL: return "internal";
    case DMVTON_ERR_CONFIG: return "config";
    case DMVTON_ERR_DATA: return "data";
    case DMVTON_ERR_NUMERIC: return "numeric";
    case DMVTON_ERR_SHAPE: return "shape";
    case DMVTON_ERR_UNSUPPORTED: return "unsupported";
    case DMVTON_ERR_STATE: return "state";
    case DMVTON_ERR_ARGUMENT: return "argument";
  }
  return "unknown";
}

const char* dmvton_last_error(void) { return t_last_error.c_str(); }

void dmvton_string_free(char* s) { std::free(s); }

dmvton_status dmvton_command_list(char** names_json) {
  return checked({{names_json, "names_json"}}, [&] { *names_json = dup_string(json(commands::command_names()).dump()); });
}

dmvton_status dmvton_command_schema(const char* command, char** schema_json) {
  return checked({{command, "command"}, {schema_json, "schema_json"}},
                 [&] { *schema_json = dup_string(commands::schema(command).to_json().dump()); });
}

dmvton_status dmvton_run_command(const char* command, const char* config_path, const char* flags_json,
                                 char** result_json) {
  return checked({{command, "command"}, {result_json, "result_json"}}, [&] {
    *result_json = nullptr;
    const json r = commands::run(command, opt_path(config_path), parse_flags(flags_json));
    *result_json = dup_string(r.dump());
  });
}

dmvton_status dmvton_model_load(const char* weights_path, const char* preset, dmvton_model** out) {
  return checked({{weights_path, "weights_path"}, {preset, "preset"}, {out, "out"}}, [&] {
    *out = nullptr;
    const auto cfg = nets::NetConfig::from_preset(preset);
    auto m = std::make_unique<dmvton_model>();
    m->net = nets::load_network(WeightArchive::load(weights_path).unpack(), cfg);
    *out = m.release();
  });
}

dmvton_status dmvton_model_create(const char* kind, const char* preset, uint64_t seed, dmvton_model** out) {
  return checked({{kind, "kind"}, {preset, "preset"}, {out, "out"}}, [&] {
    *out = nullptr;
    const auto cfg = nets::NetConfig::from_preset(preset);
    auto m = std::make_unique<dmvton_model>();
    const std::string k = kind;
    if (k == "student")
      m->net = std::make_unique<nets::StudentNet>(cfg);
    else if (k == "teacher")
      m->net = std::make_unique<nets::TeacherNet>(cfg);
    else
      fail(Errc::kConfig, "model kind must be student or teacher (got '" + k + "')");
    m->net->init(seed);
    *out = m.release();
  });
}

void dmvton_model_free(dmvton_model* model) { delete model; }

dmvton_status dmvton_model_info(const dmvton_model* model, char** info_json) {
  return checked({{model, "model"}, {info_json, "info_json"}}, [&] {
    const auto& net = *model->net;
    const auto& cfg = net.config();
    const Shape in{1, net.packed_channels(), cfg.height, cfg.width};
    const json j{{"kind", net.name()},
                 {"preset", cfg.preset},
                 {"height", cfg.height},
                 {"width", cfg.width},
                 {"params", metrics::count_params(net)},
                 {"flops", metrics::count_flops(net, in)}};
    *info_json = dup_string(j.dump());
  });
}

dmvton_status dmvton_model_save(const dmvton_model* model, const char* dir) {
  return checked({{model, "model"}, {dir, "dir"}},
                 [&] { WeightArchive::pack(model->net->export_weights(), DType::kF32).save_dir(dir); });
}

dmvton_status dmvton_model_tryon(const dmvton_model* model, const uint8_t* person_rgb, const uint8_t* garment_rgb,
                                 uint8_t* out_rgb) {
  return checked({{model, "model"}, {person_rgb, "person_rgb"}, {garment_rgb, "garment_rgb"}, {out_rgb, "out_rgb"}},
                 [&] {
                   if (std::string(model->net->name()) != "student")
                     fail(Errc::kUnsupported, "raster try-on needs a student model");
                   const auto& s = static_cast<const nets::StudentNet&>(*model->net);
                   const auto& cfg = s.config();
                   const size_t n = static_cast<size_t>(cfg.height * cfg.width * 3);
                   auto to_image = [&](const uint8_t* p) {
                     RasterU8 r{cfg.width, cfg.height, 3, std::vector<uint8_t>(p, p + n)};
                     return raster_to_image(r);
                   };
                   ag::NoGradGuard ng;
                   const auto r = s.run(ops::constant(to_image(person_rgb).batched()),
                                        ops::constant(to_image(garment_rgb).batched()));
                   const RasterU8 o = image_to_raster(ImageTensor::from_tensor(r.gen.tryon.value()));
                   std::memcpy(out_rgb, o.pixels.data(), n);
                 });
}

dmvton_status dmvton_server_create(const char* config_path, const char* flags_json, dmvton_server** out) {
  return checked({{out, "out"}}, [&] {
    *out = nullptr;
    const auto rc = config::RunConfig::merge(commands::schema("serve"), opt_path(config_path), parse_flags(flags_json));
    auto s = std::make_unique<dmvton_server>();
    s->server = std::make_unique<serve::Server>(commands::serve_options(rc));
    *out = s.release();
  });
}

dmvton_status dmvton_server_start(dmvton_server* server, int* port) {
  return checked({{server, "server"}}, [&] {
    const int p = server->server->start();
    if (port) *port = p;
  });
}

dmvton_status dmvton_server_wait(dmvton_server* server) {
  return checked({{server, "server"}}, [&] { server->server->wait(); });
}

dmvton_status dmvton_server_stop(dmvton_server* server) {
  return checked({{server, "server"}}, [&] { server->server->stop(); });
}

void dmvton_server_free(dmvton_server* server) { delete server; }

}  // extern "C"
