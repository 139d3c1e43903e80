#include "dmvton/serve.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <future>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dmvton/errors.hpp"
#include "dmvton/nets.hpp"
#include "dmvton/ops.hpp"
#include "dmvton/weights.hpp"

namespace dmvton::serve {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Catalog

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<CatalogItem> load_folder(const fs::path& dir, Size2 size) {
  if (!fs::is_directory(dir)) fail(Errc::kData, "catalog folder " + dir.string() + " not found");
  std::vector<CatalogItem> items;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_image_file(e.path())) continue;
    items.push_back({e.path().stem().string(), e.path().filename().string(), load_image(e.path(), size)});
  }
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (size_t i = 1; i < items.size(); ++i)
    if (items[i].id == items[i - 1].id) fail(Errc::kData, "duplicate catalog id '" + items[i].id + "' in " + dir.string());
  return items;
}

const CatalogItem* find_item(const std::vector<CatalogItem>& items, const std::string& id) {
  auto it = std::lower_bound(items.begin(), items.end(), id, [](const CatalogItem& c, const std::string& k) { return c.id < k; });
  return it != items.end() && it->id == id ? &*it : nullptr;
}

}  // namespace

Catalog Catalog::load(const fs::path& assets, Size2 size) {
  Catalog c;
  c.people = load_folder(assets / "people", size);
  c.garments = load_folder(assets / "garments", size);
  return c;
}

const CatalogItem* Catalog::person(const std::string& id) const { return find_item(people, id); }
const CatalogItem* Catalog::garment(const std::string& id) const { return find_item(garments, id); }

ImageTensor auto_levels(const ImageTensor& img) {
  ImageTensor out = img;
  const int64_t hw = img.height() * img.width();
  for (int64_t c = 0; c < img.channels(); ++c) {
    std::vector<double> v(img.data().begin() + c * hw, img.data().begin() + (c + 1) * hw);
    std::sort(v.begin(), v.end());
    const double lo = v[static_cast<size_t>(0.01 * static_cast<double>(hw - 1))];
    const double hi = v[static_cast<size_t>(0.99 * static_cast<double>(hw - 1))];
    if (hi - lo < 1e-6) continue;
    for (int64_t i = 0; i < hw; ++i) {
      double& x = out.data()[static_cast<size_t>(c * hw + i)];
      x = std::clamp(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Base64

std::vector<uint8_t> base64_decode(const std::string& text) {
  std::string s;
  size_t start = 0;
  if (text.rfind("data:", 0) == 0) {
    const auto comma = text.find(',');
    if (comma == std::string::npos || text.substr(0, comma).find(";base64") == std::string::npos)
      fail(Errc::kData, "data URL is not base64 encoded");
    start = comma + 1;
  }
  s.reserve(text.size() - start);
  for (size_t i = start; i < text.size(); ++i)
    if (!std::isspace(static_cast<unsigned char>(text[i]))) s.push_back(text[i]);
  if (s.size() % 4 != 0) fail(Errc::kData, "base64 length is not a multiple of 4");
  std::vector<uint8_t> out(s.size() / 4 * 3);
  if (s.empty()) return out;
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(s.data()), static_cast<int>(s.size()));
  if (n < 0) fail(Errc::kData, "malformed base64");
  size_t pad = 0;
  if (s.back() == '=') ++pad;
  if (s.size() >= 2 && s[s.size() - 2] == '=') ++pad;
  out.resize(static_cast<size_t>(n) - pad);
  return out;
}

std::string base64_encode(const std::vector<uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

// ---------------------------------------------------------------------------
// Server

namespace {

// Maps a request failure to an HTTP status.
struct HttpError {
  int status;
  std::string message;
};

const char* status_kind(int status) {
  switch (status) {
    case 400: return "bad_request";
    case 404: return "not_found";
    case 405: return "method_not_allowed";
    case 413: return "payload_too_large";
    case 429: return "busy";
    case 503: return "unavailable";
    default: return status >= 500 ? "internal" : "error";
  }
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  const json body{{"error", {{"status", status}, {"kind", status_kind(status)}, {"message", message}}}};
  res.set_content(body.dump(), "application/json");
}

}  // namespace

struct Server::Impl {
  ServeOptions opt;
  nets::NetConfig cfg;
  Catalog catalog;
  httplib::Server http;
  std::thread listener;
  int bound_port = -1;

  std::atomic<bool> model_ready{false};
  std::unique_ptr<nets::StudentNet> model;

  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::function<void()>> queue;
  std::vector<std::thread> workers;
  bool stopping = false;

  std::mutex stop_mu;
  std::condition_variable stop_cv;
  bool stopped = false;

  void worker_loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock lk(mu);
        cv.wait(lk, [&] { return stopping || !queue.empty(); });
        if (queue.empty()) return;
        task = std::move(queue.front());
        queue.pop_front();
      }
      task();
    }
  }

  std::vector<uint8_t> infer(const ImageTensor& person, const ImageTensor& garment) const {
    ag::NoGradGuard ng;
    const auto out = model->run(ops::constant(person.batched()), ops::constant(garment.batched()));
    return encode_png(image_to_raster(ImageTensor::from_tensor(out.gen.tryon.value())));
  }

  std::vector<uint8_t> submit(const ImageTensor& person, const ImageTensor& garment) {
    if (!model_ready.load()) fail(Errc::kState, "model weights are not loaded yet");
    auto task = std::make_shared<std::packaged_task<std::vector<uint8_t>()>>(
        [this, person, garment] { return infer(person, garment); });
    auto fut = task->get_future();
    {
      std::lock_guard lk(mu);
      if (stopping) fail(Errc::kState, "server is shutting down");
      if (queue.size() >= opt.queue_depth) fail(Errc::kUnsupported, "inference queue is full");
      queue.emplace_back([task] { (*task)(); });
    }
    cv.notify_one();
    return fut.get();
  }

  ImageTensor prepare_person(const ImageTensor& raw) const {
    ImageTensor img = resize_image(center_crop_aspect(raw, 4, 3), cfg.image_size());
    if (opt.person_hook) img = opt.person_hook(img);
    return img;
  }

  ImageTensor prepare_garment(const ImageTensor& raw) const { return resize_image(raw, cfg.image_size()); }

  ImageTensor decode_upload(const std::string& bytes, const char* what) const {
    if (bytes.size() > opt.max_upload_bytes)
      throw HttpError{413, std::string(what) + " exceeds " + std::to_string(opt.max_upload_bytes) + " bytes"};
    try {
      const auto span = std::span(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size());
      return raster_to_image(decode_image(span, 3));
    } catch (const Error& e) {
      throw HttpError{400, std::string(what) + " is not a decodable PNG or JPEG: " + e.what()};
    }
  }

  // Exactly one of <role>_id / <role>_image must be present.
  ImageTensor resolve(const std::optional<std::string>& id, const std::optional<std::string>& image_bytes,
                      const std::string& role) const {
    if (id && image_bytes) throw HttpError{400, "give either " + role + "_id or " + role + "_image, not both"};
    if (!id && !image_bytes) throw HttpError{400, "missing " + role + "_id or " + role + "_image"};
    if (id) {
      const CatalogItem* item = role == "person" ? catalog.person(*id) : catalog.garment(*id);
      if (!item) throw HttpError{404, "unknown " + role + " id '" + *id + "'"};
      return item->image;
    }
    const ImageTensor raw = decode_upload(*image_bytes, (role + "_image").c_str());
    return role == "person" ? prepare_person(raw) : prepare_garment(raw);
  }

  void handle_tryon(const httplib::Request& req, httplib::Response& res) {
    if (!model_ready.load()) return send_error(res, 503, "model weights are not loaded yet");
    try {
      std::optional<std::string> person_id, garment_id, person_img, garment_img;
      if (req.is_multipart_form_data()) {
        for (const auto& [name, part] : req.files) {
          if (name == "person_id") person_id = part.content;
          else if (name == "garment_id") garment_id = part.content;
          else if (name == "person_image") person_img = part.content;
          else if (name == "garment_image") garment_img = part.content;
          else throw HttpError{400, "unexpected form field '" + name + "'"};
        }
      } else if (req.get_header_value("Content-Type").rfind("application/json", 0) == 0) {
        json body;
        try {
          body = json::parse(req.body);
        } catch (const json::parse_error&) {
          throw HttpError{400, "request body is not valid JSON"};
        }
        if (!body.is_object()) throw HttpError{400, "request body must be a JSON object"};
        for (const auto& [key, value] : body.items()) {
          if (!value.is_string()) throw HttpError{400, "field '" + key + "' must be a string"};
          const std::string v = value.get<std::string>();
          if (key == "person_id") person_id = v;
          else if (key == "garment_id") garment_id = v;
          else if (key == "person_image" || key == "garment_image") {
            if (v.size() / 4 * 3 > opt.max_upload_bytes + 3)
              throw HttpError{413, key + " exceeds " + std::to_string(opt.max_upload_bytes) + " bytes"};
            std::vector<uint8_t> raw;
            try {
              raw = base64_decode(v);
            } catch (const Error& e) {
              throw HttpError{400, key + ": " + e.what()};
            }
            (key == "person_image" ? person_img : garment_img) = std::string(raw.begin(), raw.end());
          } else {
            throw HttpError{400, "unexpected field '" + key + "'"};
          }
        }
      } else {
        throw HttpError{400, "Content-Type must be multipart/form-data or application/json"};
      }
      const ImageTensor person = resolve(person_id, person_img, "person");
      const ImageTensor garment = resolve(garment_id, garment_img, "garment");
      const auto png = submit(person, garment);
      res.status = 200;
      res.set_content(std::string(png.begin(), png.end()), "image/png");
    } catch (const HttpError& e) {
      send_error(res, e.status, e.message);
    } catch (const Error& e) {
      if (e.code() == Errc::kUnsupported) return send_error(res, 429, e.what());
      if (e.code() == Errc::kState) return send_error(res, 503, e.what());
      send_error(res, 500, e.what());
    }
  }

  json catalog_json(const std::vector<CatalogItem>& items, const std::string& folder) const {
    json arr = json::array();
    for (const auto& it : items) arr.push_back({{"id", it.id}, {"thumbnail_url", "/assets/" + folder + "/" + it.file}});
    return arr;
  }

  void routes() {
    http.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
      if (!model_ready.load()) return send_error(res, 503, "model weights are not loaded yet");
      const json body{{"status", "ok"},
                      {"preset", cfg.preset},
                      {"height", cfg.height},
                      {"width", cfg.width},
                      {"queue_depth", opt.queue_depth},
                      {"workers", opt.workers}};
      res.set_content(body.dump(), "application/json");
    });
    http.Get("/api/people", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(json{{"people", catalog_json(catalog.people, "people")}}.dump(), "application/json");
    });
    http.Get("/api/garments", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(json{{"garments", catalog_json(catalog.garments, "garments")}}.dump(), "application/json");
    });
    http.Post("/api/tryon", [this](const httplib::Request& req, httplib::Response& res) { handle_tryon(req, res); });
    http.set_mount_point("/assets/people", (opt.assets / "people").string());
    http.set_mount_point("/assets/garments", (opt.assets / "garments").string());
    if (opt.static_dir) {
      if (!fs::is_directory(*opt.static_dir))
        fail(Errc::kConfig, "static directory " + opt.static_dir->string() + " not found");
      http.set_mount_point("/", opt.static_dir->string());
    }
    // Bodies are capped above the image limit so base64 JSON fits; the
    // per-image limit is checked after decoding.
    http.set_payload_max_length(opt.max_upload_bytes / 3 * 4 + (size_t{1} << 20));
    http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      const int status = res.status;
      std::string msg = httplib::status_message(status);
      if (status == 413) msg = "request body exceeds the upload limit";
      send_error(res, status, msg);
    });
    const int threads = opt.http_threads;
    http.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<size_t>(threads)); };
  }
};

Server::Server(ServeOptions opt) : impl_(std::make_unique<Impl>()) {
  if (opt.workers < 1) fail(Errc::kConfig, "workers must be >= 1");
  if (opt.queue_depth < 1) fail(Errc::kConfig, "queue depth must be >= 1");
  if (opt.http_threads < 1) fail(Errc::kConfig, "http threads must be >= 1");
  if (opt.port < 0 || opt.port > 65535) fail(Errc::kConfig, "port must be in [0, 65535]");
  impl_->cfg = nets::NetConfig::from_preset(opt.preset);
  impl_->opt = std::move(opt);
  impl_->catalog = Catalog::load(impl_->opt.assets, impl_->cfg.image_size());
}

Server::~Server() { stop(); }

void Server::load_model() {
  const NamedTensors w = WeightArchive::load(impl_->opt.weights).unpack();
  if (nets::weights_kind(w) != "student")
    fail(Errc::kConfig, "serve needs student weights; " + impl_->opt.weights.string() + " holds teacher weights");
  auto net = nets::load_network(w, impl_->cfg);
  impl_->model.reset(static_cast<nets::StudentNet*>(net.release()));
  impl_->model_ready.store(true);
}

int Server::start() {
  auto& m = *impl_;
  if (m.bound_port >= 0) fail(Errc::kState, "server already started");
  if (!m.opt.defer_load) load_model();
  m.routes();
  m.bound_port = m.opt.port == 0 ? m.http.bind_to_any_port(m.opt.host) : (m.http.bind_to_port(m.opt.host, m.opt.port) ? m.opt.port : -1);
  if (m.bound_port < 0) fail(Errc::kConfig, "cannot bind " + m.opt.host + ":" + std::to_string(m.opt.port));
  for (int i = 0; i < m.opt.workers; ++i) m.workers.emplace_back([&m] { m.worker_loop(); });
  m.listener = std::thread([&m] { m.http.listen_after_bind(); });
  m.http.wait_until_ready();
  return m.bound_port;
}

bool Server::ready() const { return impl_->model_ready.load(); }

void Server::wait() {
  std::unique_lock lk(impl_->stop_mu);
  impl_->stop_cv.wait(lk, [&] { return impl_->stopped; });
}

void Server::stop() {
  auto& m = *impl_;
  {
    std::lock_guard lk(m.stop_mu);
    if (m.stopped) return;
    m.stopped = true;
  }
  m.http.stop();
  if (m.listener.joinable()) m.listener.join();
  {
    std::lock_guard lk(m.mu);
    m.stopping = true;
  }
  m.cv.notify_all();
  for (auto& t : m.workers)
    if (t.joinable()) t.join();
  m.stop_cv.notify_all();
}

int Server::port() const { return impl_->bound_port; }

std::vector<uint8_t> Server::tryon_png(const ImageTensor& person, const ImageTensor& garment) {
  if (person.size() != image_size() || garment.size() != image_size())
    fail(Errc::kShape, "try-on inputs must be at the model resolution");
  return impl_->submit(person, garment);
}

const Catalog& Server::catalog() const { return impl_->catalog; }
Size2 Server::image_size() const { return impl_->cfg.image_size(); }

}  // namespace dmvton::serve
