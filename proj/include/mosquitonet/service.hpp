#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "mosquitonet/checkpoint.hpp"
#include "mosquitonet/data.hpp"
#include "mosquitonet/xai.hpp"

namespace mqnet {

struct ServiceOptions {
  std::size_t max_body_bytes = 10u * 1024u * 1024u;
  std::size_t threads = 4;
  std::string cors_origin = "*";
  float overlay_alpha = 0.4f;
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

/// A loaded checkpoint, immutable once published.
struct ServedModel {
  MosquitoNet model;
  std::string model_id;
  std::size_t parameter_count = 0;
};

/// Request handling over one shared read-only model. Handlers are plain
/// functions of the request so they can be exercised without sockets.
class InferenceService {
 public:
  explicit InferenceService(ServiceOptions options = {}) : options_(std::move(options)) {}

  /// Publishes the model; allowed once.
  void publish(LoadedCheckpoint loaded) {
    auto served = std::make_unique<ServedModel>();
    served->parameter_count = count_parameters(loaded.model);
    served->model_id = loaded.model_id();
    served->model = std::move(loaded.model);
    const ServedModel* expected = nullptr;
    if (!current_.compare_exchange_strong(expected, served.get())) {
      throw std::logic_error("service model already loaded");
    }
    owned_ = std::move(served);
  }

  bool ready() const noexcept { return current_.load(std::memory_order_acquire) != nullptr; }
  const ServiceOptions& options() const noexcept { return options_; }

  ApiResponse health() const {
    const ServedModel* m = current_.load(std::memory_order_acquire);
    if (!m) return {503, {{"status", "loading"}}};
    return {200, {{"status", "ok"}, {"model_id", m->model_id}}};
  }

  ApiResponse model_info() const {
    const ServedModel* m = current_.load(std::memory_order_acquire);
    if (!m) return not_ready();
    const ModelConfig& c = m->model.config();
    nlohmann::json config = nlohmann::json::object();
    for (const auto& [k, v] : c.to_key_values()) config[k] = v;
    return {200,
            {{"model_id", m->model_id},
             {"parameter_count", m->parameter_count},
             {"input_shape", {c.channels, c.height, c.width}},
             {"config", config},
             {"classes", {"uninfected", "parasitized"}}}};
  }

  ApiResponse predict(std::span<const std::uint8_t> image_bytes, bool with_gradcam) const {
    const ServedModel* m = current_.load(std::memory_order_acquire);
    if (!m) return not_ready();
    if (image_bytes.size() > options_.max_body_bytes) {
      return error(413, "image of " + std::to_string(image_bytes.size()) + " bytes exceeds the limit of " +
                            std::to_string(options_.max_body_bytes));
    }
    Tensor input;
    try {
      input = preprocess_for(m->model.config(), image_bytes);
    } catch (const ImageError& e) {
      return error(400, std::string("not a valid image: ") + e.what());
    }

    const auto t0 = std::chrono::steady_clock::now();
    const Prediction p = mqnet::predict(m->model, input);
    const auto t1 = std::chrono::steady_clock::now();

    nlohmann::json body = {
        {"label", class_name(p.label)},
        {"probabilities", {{"uninfected", p.probabilities[0]}, {"parasitized", p.probabilities[1]}}},
        {"inference_ms", std::chrono::duration<double, std::milli>(t1 - t0).count()},
        {"model_id", m->model_id},
    };
    if (with_gradcam) {
      const GradCam cam = gradcam(m->model, input, p.label);
      const auto png = overlay_png(input, cam.heatmap, options_.overlay_alpha);
      body["heatmap_png_base64"] = httplib::detail::base64_encode(std::string(png.begin(), png.end()));
    }
    return {200, std::move(body)};
  }

  static ApiResponse error(int status, const std::string& message) { return {status, {{"error", message}}}; }

 private:
  static ApiResponse not_ready() { return error(503, "model not loaded yet"); }

  ServiceOptions options_;
  std::unique_ptr<ServedModel> owned_;
  std::atomic<const ServedModel*> current_{nullptr};
};

/// The HTTP front: routes, body limits, CORS and a bounded worker pool.
class HttpServer {
 public:
  explicit HttpServer(InferenceService& service) : service_(service) {
    const ServiceOptions& o = service_.options();
    const std::size_t threads = o.threads;
    server_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    // Accept slightly more than the image limit so multipart framing fits;
    // the image itself is checked against the exact limit.
    server_.set_payload_max_length(o.max_body_bytes + 64 * 1024);

    server_.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) { send(res, service_.health()); });
    server_.Get("/api/model", [this](const httplib::Request&, httplib::Response& res) { send(res, service_.model_info()); });
    server_.Post("/api/predict", [this](const httplib::Request& req, httplib::Response& res) { predict(req, res); });
    server_.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    const std::string origin = o.cors_origin;
    server_.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      const std::string msg = res.status == 413 ? "request body too large" : httplib::status_message(res.status);
      res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    });
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      res.status = 500;
      res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    });
  }

  ~HttpServer() { stop(); }

  /// Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  /// Binds and serves on the calling thread until stop().
  void run(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  httplib::Server& raw() noexcept { return server_; }

 private:
  static void send(httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  }

  void predict(const httplib::Request& req, httplib::Response& res) {
    bool cam = false;
    if (req.has_param("gradcam")) {
      try {
        cam = text::parse_bool(req.get_param_value("gradcam"), "gradcam");
      } catch (const text::ParseError& e) {
        send(res, InferenceService::error(400, e.what()));
        return;
      }
    }
    if (req.is_multipart_form_data()) {
      if (!req.has_file("image")) {
        send(res, InferenceService::error(400, "multipart body needs an 'image' field"));
        return;
      }
      const std::string& content = req.get_file_value("image").content;
      send(res, service_.predict({reinterpret_cast<const std::uint8_t*>(content.data()), content.size()}, cam));
      return;
    }
    send(res, service_.predict({reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size()}, cam));
  }

  InferenceService& service_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace mqnet
