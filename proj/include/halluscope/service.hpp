#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "halluscope/pipeline.hpp"

namespace halluscope::service {

struct Response {
  int status = 200;
  nlohmann::json body;
};

/// Request handling without a socket. Safe for concurrent calls.
class DetectionService {
 public:
  explicit DetectionService(pipeline::Detector detector);

  /// POST /v1/detect: {"cache": dir, "sample_id": id} or {"capture": inline sample}.
  Response detect(const std::string& body) const;
  /// GET /v1/health
  Response health() const;

 private:
  const CacheReader& reader(const std::string& dir) const;

  pipeline::Detector detector_;
  mutable std::mutex mu_;
  mutable std::map<std::string, std::unique_ptr<CacheReader>> readers_;
};

/// Blocks until the server stops. Returns false if the port could not be bound.
bool serve(const DetectionService& service, const std::string& host, int port);

}  // namespace halluscope::service
