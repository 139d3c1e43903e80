#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dmvton/image.hpp"

// HTTP try-on service. Routes and payloads are documented in docs/api.md.
namespace dmvton::serve {

inline constexpr size_t kMaxUploadBytes = size_t{8} << 20;
inline constexpr size_t kDefaultQueueDepth = 16;

struct CatalogItem {
  std::string id;        // file stem
  std::string file;      // file name inside the catalog folder
  ImageTensor image;     // resized to the model resolution
};

// assets/people/* and assets/garments/* (PNG or JPEG), sorted by id.
struct Catalog {
  std::vector<CatalogItem> people;
  std::vector<CatalogItem> garments;

  static Catalog load(const std::filesystem::path& assets, Size2 size);
  const CatalogItem* person(const std::string& id) const;
  const CatalogItem* garment(const std::string& id) const;
};

// Optional person pre-processing applied after crop and resize.
using ImageHook = std::function<ImageTensor(const ImageTensor&)>;

// Stretches each channel to the full [-1, 1] range (1st to 99th percentile).
ImageTensor auto_levels(const ImageTensor& img);

struct ServeOptions {
  std::filesystem::path weights;  // student weight archive
  std::filesystem::path assets;
  std::optional<std::filesystem::path> static_dir;  // served at /
  std::string preset = "tiny";
  std::string host = "127.0.0.1";
  int port = 8080;  // 0: any free port
  int workers = 1;  // inference threads
  size_t queue_depth = kDefaultQueueDepth;
  int http_threads = 8;
  size_t max_upload_bytes = kMaxUploadBytes;
  // Listen before the weights are loaded; load_model() must be called.
  bool defer_load = false;
  ImageHook person_hook;
};

class Server {
 public:
  // Loads the asset catalog. Weights are loaded by start() unless deferred.
  explicit Server(ServeOptions opt);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds, starts the listener and the inference workers, returns the port.
  int start();
  void load_model();
  bool ready() const;
  // Blocks until stop() is called.
  void wait();
  void stop();
  int port() const;

  // Runs one try-on through the inference queue; PNG bytes at the model
  // resolution. Throws kState before the model is loaded and kUnsupported
  // ("queue full") when the queue is at capacity.
  std::vector<uint8_t> tryon_png(const ImageTensor& person, const ImageTensor& garment);

  const Catalog& catalog() const;
  Size2 image_size() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Base64 (RFC 4648) decoding; kData on malformed input. A data-URL prefix
// ("data:...;base64,") is skipped.
std::vector<uint8_t> base64_decode(const std::string& text);
std::string base64_encode(const std::vector<uint8_t>& bytes);

}  // namespace dmvton::serve
