#include <gtest/gtest.h>

#include <future>

#include "mosquitonet/service.hpp"
#include "support/gradcheck.hpp"

using namespace mqnet;
using mqnet::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.height = c.width = 16;
  c.conv_channels = {3, 4};
  c.fc_sizes = {5};
  return c;
}

LoadedCheckpoint small_checkpoint(std::uint64_t seed = 3) {
  MosquitoNet m = MosquitoNet::build(small_config(), RngSeed{seed});
  return deserialize_checkpoint(serialize_checkpoint(m));
}

std::string png_bytes(std::size_t h, std::size_t w, std::uint64_t seed) {
  const auto png = encode_png(to_rgb_image(random_tensor({3, h, w}, seed, 0.0f, 1.0f)));
  return {png.begin(), png.end()};
}

std::string base64_decode(const std::string& in) {
  static const std::string alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  unsigned acc = 0;
  int bits = 0;
  for (char ch : in) {
    if (ch == '=') break;
    const auto v = alphabet.find(ch);
    if (v == std::string::npos) throw std::invalid_argument("bad base64");
    acc = (acc << 6) | static_cast<unsigned>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    options_.max_body_bytes = 64 * 1024;
    options_.cors_origin = "http://example.test";
    service_ = std::make_unique<InferenceService>(options_);
    server_ = std::make_unique<HttpServer>(*service_);
    port_ = server_->start("127.0.0.1", 0);
  }
  void TearDown() override { server_->stop(); }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(30, 0);
    return c;
  }

  ServiceOptions options_;
  std::unique_ptr<InferenceService> service_;
  std::unique_ptr<HttpServer> server_;
  int port_ = 0;
};

}  // namespace

TEST_F(ServiceTest, UnavailableUntilModelLoads) {
  auto c = client();
  auto health = c.Get("/api/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 503);
  EXPECT_EQ(c.Get("/api/model")->status, 503);
  EXPECT_EQ(c.Post("/api/predict", png_bytes(16, 16, 1), "image/png")->status, 503);

  const auto loaded = small_checkpoint();
  const std::string id = loaded.model_id();
  service_->publish(small_checkpoint());
  health = c.Get("/api/health");
  ASSERT_EQ(health->status, 200);
  const auto j = nlohmann::json::parse(health->body);
  EXPECT_EQ(j["status"], "ok");
  EXPECT_EQ(j["model_id"], id);
  EXPECT_THROW(service_->publish(small_checkpoint()), std::logic_error);
}

TEST_F(ServiceTest, ModelMetadataRoundTripsConfig) {
  service_->publish(small_checkpoint());
  auto res = client().Get("/api/model");
  ASSERT_EQ(res->status, 200);
  const auto j = nlohmann::json::parse(res->body);
  EXPECT_EQ(j["input_shape"], nlohmann::json({3, 16, 16}));
  MosquitoNet reference = MosquitoNet::build(small_config(), RngSeed{0});
  EXPECT_EQ(j["parameter_count"].get<std::size_t>(), count_parameters(reference));

  text::KeyValues kv;
  for (const auto& [k, v] : j["config"].items()) kv.emplace(k, v.get<std::string>());
  ModelConfig parsed;
  parsed.apply(kv);
  EXPECT_EQ(parsed, small_config());
}

TEST_F(ServiceTest, PredictMatchesLibrary) {
  auto loaded = small_checkpoint();
  const MosquitoNet copy = loaded.model;
  service_->publish(std::move(loaded));

  const std::string body = png_bytes(40, 30, 7);
  auto res = client().Post("/api/predict", body, "image/png");
  ASSERT_EQ(res->status, 200) << res->body;
  EXPECT_EQ(res->get_header_value("Content-Type"), "application/json");
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "http://example.test");
  const auto j = nlohmann::json::parse(res->body);

  const std::vector<std::uint8_t> bytes(body.begin(), body.end());
  const Prediction p = predict(copy, resize_bilinear(to_tensor(decode_image(bytes)), 16, 16));
  EXPECT_EQ(j["label"], std::string(class_name(p.label)));
  EXPECT_EQ(j["probabilities"]["uninfected"].get<double>(), static_cast<double>(p.probabilities[0]));
  EXPECT_EQ(j["probabilities"]["parasitized"].get<double>(), static_cast<double>(p.probabilities[1]));
  EXPECT_GE(j["inference_ms"].get<double>(), 0.0);
  EXPECT_FALSE(j.contains("heatmap_png_base64"));
}

TEST_F(ServiceTest, ConcurrentRequestsAgree) {
  service_->publish(small_checkpoint());
  const std::string body = png_bytes(16, 16, 11);
  std::vector<std::future<std::string>> replies;
  for (int i = 0; i < 16; ++i) {
    replies.push_back(std::async(std::launch::async, [&] {
      auto res = client().Post("/api/predict", body, "image/png");
      if (!res || res->status != 200) return std::string("failed");
      auto j = nlohmann::json::parse(res->body);
      return j["probabilities"].dump() + j["label"].dump();
    }));
  }
  const std::string first = replies.front().get();
  EXPECT_NE(first, "failed");
  for (std::size_t i = 1; i < replies.size(); ++i) EXPECT_EQ(replies[i].get(), first);
}

TEST_F(ServiceTest, RejectsUndecodableBody) {
  service_->publish(small_checkpoint());
  auto res = client().Post("/api/predict", "hello", "application/octet-stream");
  ASSERT_EQ(res->status, 400);
  EXPECT_TRUE(nlohmann::json::parse(res->body).contains("error"));
  EXPECT_EQ(client().Post("/api/predict", "", "image/png")->status, 400);
}

TEST_F(ServiceTest, RejectsOversizedBody) {
  service_->publish(small_checkpoint());
  const std::string huge(options_.max_body_bytes + 128 * 1024, 'x');
  auto res = client().Post("/api/predict", huge, "image/png");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 413);

  const std::vector<std::uint8_t> just_over(options_.max_body_bytes + 1, 0);
  EXPECT_EQ(service_->predict(just_over, false).status, 413);
}

TEST_F(ServiceTest, AcceptsMultipartImageField) {
  service_->publish(small_checkpoint());
  const std::string png = png_bytes(16, 16, 5);
  httplib::MultipartFormDataItems items = {{"image", png, "cell.png", "image/png"}};
  auto res = client().Post("/api/predict", items);
  ASSERT_EQ(res->status, 200) << res->body;
  auto direct = client().Post("/api/predict", png, "image/png");
  EXPECT_EQ(nlohmann::json::parse(res->body)["probabilities"], nlohmann::json::parse(direct->body)["probabilities"]);

  httplib::MultipartFormDataItems wrong = {{"file", png, "cell.png", "image/png"}};
  EXPECT_EQ(client().Post("/api/predict", wrong)->status, 400);
}

TEST_F(ServiceTest, GradcamReturnsDecodablePng) {
  service_->publish(small_checkpoint());
  auto res = client().Post("/api/predict?gradcam=true", png_bytes(16, 16, 9), "image/png");
  ASSERT_EQ(res->status, 200) << res->body;
  const auto j = nlohmann::json::parse(res->body);
  ASSERT_TRUE(j.contains("heatmap_png_base64"));
  const std::string raw = base64_decode(j["heatmap_png_base64"].get<std::string>());
  const RgbImage img = decode_image(std::vector<std::uint8_t>(raw.begin(), raw.end()));
  EXPECT_EQ(img.height, 16u);
  EXPECT_EQ(img.width, 16u);

  EXPECT_EQ(client().Post("/api/predict?gradcam=maybe", png_bytes(16, 16, 9), "image/png")->status, 400);
}

TEST_F(ServiceTest, PreflightAndUnknownRoutes) {
  auto c = client();
  auto pre = c.Options("/api/predict");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_EQ(pre->get_header_value("Access-Control-Allow-Origin"), "http://example.test");
  auto missing = c.Get("/api/nothing");
  EXPECT_EQ(missing->status, 404);
  EXPECT_TRUE(nlohmann::json::parse(missing->body).contains("error"));
}
