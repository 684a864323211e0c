#pragma once

// HTTP chat-completion client used to generate class descriptions.
//
// Speaks the common chat-completions wire format: POST a JSON body with
// "model" and "messages", read choices[0].message.content from the reply.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <cstdlib>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "sap/description_catalog.hpp"

namespace sap {

inline constexpr const char *kApiKeyEnv = "SAP_LLM_API_KEY";

struct ChatClientConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-3.5-turbo";
  double temperature = 0.0;
  int timeout_seconds = 60;
};

class ChatCompletionClient : public DescriptionProvider {
 public:
  ChatCompletionClient(ChatClientConfig config, std::string api_key)
      : config_(std::move(config)), api_key_(std::move(api_key)) {
    split_endpoint();
  }

  // Reads the credential from SAP_LLM_API_KEY; throws if it is unset.
  static ChatCompletionClient from_environment(ChatClientConfig config) {
    const char *key = std::getenv(kApiKeyEnv);
    if (key == nullptr || *key == '\0')
      throw std::runtime_error(std::string("LLM credential missing: set ") + kApiKeyEnv);
    return ChatCompletionClient(std::move(config), key);
  }

  std::string complete(const std::string &query) override {
    httplib::Client client(origin_);
    client.set_connection_timeout(config_.timeout_seconds);
    client.set_read_timeout(config_.timeout_seconds);
    httplib::Headers headers{{"Authorization", "Bearer " + api_key_}};
    const nlohmann::json body = {{"model", config_.model},
                                 {"temperature", config_.temperature},
                                 {"messages", nlohmann::json::array({{{"role", "user"}, {"content", query}}})}};
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw std::runtime_error("request to " + config_.endpoint + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200)
      throw std::runtime_error("provider returned HTTP " + std::to_string(res->status) + ": " + res->body);
    const auto reply = nlohmann::json::parse(res->body, nullptr, false);
    if (reply.is_discarded()) throw std::runtime_error("provider returned malformed JSON");
    try {
      const auto &content = reply.at("choices").at(0).at("message").at("content");
      return content.is_null() ? std::string() : content.get<std::string>();
    } catch (const nlohmann::json::exception &e) {
      throw std::runtime_error(std::string("unexpected provider reply: ") + e.what());
    }
  }

  const ChatClientConfig &config() const { return config_; }

 private:
  void split_endpoint() {
    const auto scheme = config_.endpoint.find("://");
    if (scheme == std::string::npos) throw std::invalid_argument("endpoint must include a scheme: " + config_.endpoint);
    const auto slash = config_.endpoint.find('/', scheme + 3);
    origin_ = config_.endpoint.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : config_.endpoint.substr(slash);
  }

  ChatClientConfig config_;
  std::string api_key_;
  std::string origin_;
  std::string path_;
};

}  // namespace sap
