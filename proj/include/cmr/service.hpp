#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "cmr/standardize.hpp"

namespace cmr {

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::filesystem::path workdir = "cmradjust-work";
  std::size_t max_upload_bytes = std::size_t(256) << 20;
  std::optional<std::filesystem::path> static_dir;  // served at /
};

/// HTTP/JSON front end over uploaded volumes.
///
///   POST /volumes                     upload (raw body or multipart field "file")
///   GET  /volumes/{id}                metadata
///   GET  /volumes/{id}/slices/{k}     8-bit PNG, windowed to [0, G]
///   GET  /volumes/{id}/prediction     per-slice probabilities and consensus
///   POST /volumes/{id}/adjust         {"code": "011"}: apply correct(vol, code)
///   GET|POST /volumes/{id}/save       current file bytes
///
/// Uploaded volumes live under the working directory, so a restarted service
/// sees the same ids. Operations on one id are serialized.
class Service {
 public:
  /// `model` may be null; prediction endpoints then answer 503.
  Service(ServiceOptions opts, std::shared_ptr<const OrientationRecognizer> model);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds the socket and returns the bound port. Throws on failure.
  int bind();
  /// Serves until stop(); calls bind() first if needed.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cmr
