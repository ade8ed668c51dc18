#include "cmr/service.hpp"

#include <map>
#include <mutex>
#include <random>
#include <sstream>

#include "cmr/render.hpp"
#include "cmr/volume_io.hpp"
#include "httplib.h"

namespace cmr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct HttpError : std::runtime_error {
  int status;
  HttpError(int s, const std::string& what) : std::runtime_error(what), status(s) {}
};

// One uploaded volume. `transform` is the net operation applied to the
// upload; the current volume is always derived from the original so repeated
// adjustments never accumulate rounding in the affine.
struct Entry {
  std::mutex mu;
  std::string id;
  std::string filename;
  bool gzip = false;
  Volume original;
  Volume current;
  OrientCode transform;
  std::optional<Recognition> prediction;
};

std::string new_id() {
  static std::mutex mu;
  static std::mt19937_64 rng(std::random_device{}());
  std::lock_guard lock(mu);
  std::ostringstream s;
  s << std::hex << rng();
  return s.str();
}

json volume_info(const Entry& e) {
  const Volume& v = e.current;
  return {{"id", e.id},
          {"filename", e.filename},
          {"dims", {v.sx(), v.sy(), v.sz()}},
          {"slices", v.sz()},
          {"spacing", {v.spacing[0], v.spacing[1], v.spacing[2]}},
          {"max_gray", v.max_gray()},
          {"transform", e.transform.str()}};
}

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

}  // namespace

struct Service::Impl {
  ServiceOptions opts;
  std::shared_ptr<const OrientationRecognizer> model;
  httplib::Server server;
  std::mutex map_mu;
  std::map<std::string, std::shared_ptr<Entry>> entries;
  int bound_port = -1;

  fs::path dir_of(const std::string& id) const { return opts.workdir / id; }
  fs::path original_path(const Entry& e) const { return dir_of(e.id) / (e.gzip ? "original.nii.gz" : "original.nii"); }

  void persist_meta(const Entry& e) const {
    write_file_atomic(dir_of(e.id) / "meta.json",
                      json{{"filename", e.filename}, {"gzip", e.gzip}, {"transform", e.transform.str()}}.dump());
  }

  void load_existing() {
    std::error_code ec;
    fs::create_directories(opts.workdir, ec);
    if (ec) throw std::runtime_error("cannot create working directory " + opts.workdir.string() + ": " + ec.message());
    for (const auto& d : fs::directory_iterator(opts.workdir)) {
      if (!d.is_directory() || !fs::exists(d.path() / "meta.json")) continue;
      try {
        auto e = std::make_shared<Entry>();
        e->id = d.path().filename().string();
        const json meta = json::parse(read_file_bytes(d.path() / "meta.json"));
        e->filename = meta.at("filename").get<std::string>();
        e->gzip = meta.at("gzip").get<bool>();
        e->transform = OrientCode::parse(meta.at("transform").get<std::string>());
        e->original = read_volume(original_path(*e));
        e->current = apply_to_volume(e->transform, e->original);
        entries[e->id] = e;
      } catch (const std::exception&) {
        // A damaged entry is skipped rather than blocking startup.
      }
    }
  }

  std::shared_ptr<Entry> find(const std::string& id) {
    std::lock_guard lock(map_mu);
    auto it = entries.find(id);
    if (it == entries.end()) throw HttpError(404, "unknown volume id '" + id + "'");
    return it->second;
  }

  const Recognition& predict(Entry& e) {
    if (!model) throw HttpError(503, "no recognition model loaded");
    if (!e.prediction) e.prediction = recognize(e.current, *model);
    return *e.prediction;
  }

  void upload(const httplib::Request& req, httplib::Response& res) {
    std::string bytes, filename;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("file")) throw HttpError(400, "multipart upload needs a 'file' field");
      const auto f = req.get_file_value("file");
      bytes = f.content;
      filename = f.filename;
    } else {
      bytes = req.body;
      filename = req.get_header_value("X-Filename");
    }
    if (bytes.empty()) throw HttpError(400, "empty upload");
    if (bytes.size() > opts.max_upload_bytes) throw HttpError(413, "upload exceeds the size cap");
    auto e = std::make_shared<Entry>();
    e->gzip = has_gzip_magic(bytes);
    try {
      e->original = decode_nifti(bytes, filename.empty() ? "upload" : filename);
    } catch (const VolumeError& err) {
      throw HttpError(400, err.what());
    }
    e->current = e->original;
    e->id = new_id();
    e->filename = filename.empty() ? (e->gzip ? "volume.nii.gz" : "volume.nii") : fs::path(filename).filename().string();
    fs::create_directories(dir_of(e->id));
    write_file_atomic(original_path(*e), bytes);
    persist_meta(*e);
    {
      std::lock_guard lock(map_mu);
      entries[e->id] = e;
    }
    send_json(res, volume_info(*e), 201);
  }

  void adjust(Entry& e, const httplib::Request& req, httplib::Response& res) {
    OrientCode code;
    try {
      const json body = json::parse(req.body);
      const json& c = body.at("code");
      code = c.is_string() ? OrientCode::parse(c.get<std::string>()) : OrientCode::from_bits(c.get<unsigned>());
    } catch (const std::exception& err) {
      throw HttpError(400, std::string("invalid adjustment code: ") + err.what());
    }
    e.transform = compose(invert(code), e.transform);
    e.current = apply_to_volume(e.transform, e.original);
    e.prediction.reset();
    persist_meta(e);
    json out = volume_info(e);
    out["applied"] = code.str();
    if (model) out["prediction"] = to_json(predict(e));
    send_json(res, out);
  }

  void save(Entry& e, httplib::Response& res) {
    std::string bytes = e.transform == OrientCode() ? read_file_bytes(original_path(e)) : encode_nifti(e.current, e.gzip);
    res.set_header("Content-Disposition", "attachment; filename=\"" + e.filename + "\"");
    res.set_content(std::move(bytes), e.gzip ? "application/gzip" : "application/octet-stream");
  }

  template <typename Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const HttpError& e) {
        send_json(res, {{"error", e.what()}}, e.status);
      } catch (const std::out_of_range& e) {
        send_json(res, {{"error", e.what()}}, 404);
      } catch (const std::exception& e) {
        send_json(res, {{"error", e.what()}}, 500);
      }
    };
  }

  template <typename Fn>
  httplib::Server::Handler with_entry(Fn fn) {
    return guarded([this, fn](const httplib::Request& req, httplib::Response& res) {
      auto e = find(req.matches[1]);
      std::lock_guard lock(e->mu);
      fn(*e, req, res);
    });
  }

  void routes() {
    server.set_payload_max_length(opts.max_upload_bytes);
    server.Get("/health", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, {{"status", "ok"}, {"model", model ? json(model->name()) : json(nullptr)}});
    }));
    server.Post("/volumes", guarded([this](const httplib::Request& req, httplib::Response& res) { upload(req, res); }));
    server.Get(R"(/volumes/([0-9a-f]+))", with_entry([](Entry& e, const httplib::Request&, httplib::Response& res) {
      send_json(res, volume_info(e));
    }));
    server.Get(R"(/volumes/([0-9a-f]+)/slices/(\d+))", with_entry([](Entry& e, const httplib::Request& req, httplib::Response& res) {
      const long k = std::stol(req.matches[2]);
      if (k >= e.current.sz()) throw HttpError(404, "slice index out of range");
      res.set_content(encode_png(render_slice(e.current, int(k))), "image/png");
    }));
    server.Get(R"(/volumes/([0-9a-f]+)/prediction)", with_entry([this](Entry& e, const httplib::Request&, httplib::Response& res) {
      json out = to_json(predict(e));
      out["id"] = e.id;
      send_json(res, out);
    }));
    server.Post(R"(/volumes/([0-9a-f]+)/adjust)", with_entry([this](Entry& e, const httplib::Request& req, httplib::Response& res) {
      adjust(e, req, res);
    }));
    auto save_handler = with_entry([this](Entry& e, const httplib::Request&, httplib::Response& res) { save(e, res); });
    server.Get(R"(/volumes/([0-9a-f]+)/save)", save_handler);
    server.Post(R"(/volumes/([0-9a-f]+)/save)", save_handler);
    if (opts.static_dir && !server.set_mount_point("/", opts.static_dir->string()))
      throw std::runtime_error("static directory not found: " + opts.static_dir->string());
  }
};

Service::Service(ServiceOptions opts, std::shared_ptr<const OrientationRecognizer> model) : impl_(std::make_unique<Impl>()) {
  impl_->opts = std::move(opts);
  impl_->model = std::move(model);
  impl_->load_existing();
  impl_->routes();
}

Service::~Service() { stop(); }

int Service::bind() {
  if (impl_->bound_port >= 0) return impl_->bound_port;
  const int port = impl_->opts.port == 0 ? impl_->server.bind_to_any_port(impl_->opts.host)
                                         : (impl_->server.bind_to_port(impl_->opts.host, impl_->opts.port) ? impl_->opts.port : -1);
  if (port < 0) throw std::runtime_error("cannot bind " + impl_->opts.host + ":" + std::to_string(impl_->opts.port));
  impl_->bound_port = port;
  return port;
}

void Service::listen() {
  bind();
  impl_->server.listen_after_bind();
}

void Service::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace cmr
