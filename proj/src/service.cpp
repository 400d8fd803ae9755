#include "halluscope/service.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "halluscope/error.hpp"

namespace halluscope::service {

using nlohmann::json;

namespace {

Response error(int status, const std::string& msg) { return {status, json{{"error", msg}}}; }

int status_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::kMissingArtifact: return 404;
    case ErrorKind::kValidation: return 422;
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kFormat: return 400;
    default: return 500;
  }
}

}  // namespace

DetectionService::DetectionService(pipeline::Detector detector) : detector_(std::move(detector)) {}

const CacheReader& DetectionService::reader(const std::string& dir) const {
  std::lock_guard lock(mu_);
  auto& slot = readers_[dir];
  if (!slot) slot = std::make_unique<CacheReader>(dir);
  return *slot;
}

Response DetectionService::detect(const std::string& body) const {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception&) {
    return error(400, "request body is not valid JSON");
  }
  if (!req.is_object()) return error(400, "request body must be a JSON object");
  try {
    SampleCache sample;
    if (req.contains("capture")) {
      sample = sample_from_json(req.at("capture"));
      const auto report = validate_cache(sample);
      if (!report.ok()) return error(422, "capture " + sample.sample_id + ": " + report.summary());
    } else if (req.contains("cache") && req.contains("sample_id")) {
      const auto& r = reader(req.at("cache").get<std::string>());
      const auto id = req.at("sample_id").get<std::string>();
      const auto i = r.find(id);
      if (!i) return error(404, "sample '" + id + "' not in cache");
      sample = r.load(*i);
    } else {
      return error(400, "expected {\"cache\", \"sample_id\"} or {\"capture\"}");
    }
    return {200, pipeline::to_json(detector_.detect(sample))};
  } catch (const Error& e) {
    return error(status_for(e.kind()), e.what());
  } catch (const json::exception& e) {
    return error(400, e.what());
  }
}

Response DetectionService::health() const {
  return {200, json{{"status", "ok"},
                    {"schema_version", pipeline::kPredictSchemaVersion},
                    {"models", detector_.registered()},
                    {"n_layers", detector_.stats().n_layers},
                    {"n_heads", detector_.stats().n_heads}}};
}

bool serve(const DetectionService& service, const std::string& host, int port) {
  httplib::Server srv;
  srv.Post("/v1/detect", [&](const httplib::Request& req, httplib::Response& res) {
    const auto r = service.detect(req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  });
  srv.Get("/v1/health", [&](const httplib::Request&, httplib::Response& res) {
    const auto r = service.health();
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  });
  spdlog::info("serve: listening on {}:{}", host, port);
  return srv.listen(host, port);
}

}  // namespace halluscope::service
