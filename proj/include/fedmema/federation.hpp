#pragma once

// The federated round loop: message encoding and in-process transport, server
// and client sites, per-modality aggregation and the run driver that writes
// logs, checkpoints and metrics.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmema/anchors.hpp"
#include "fedmema/config.hpp"
#include "fedmema/lacca.hpp"
#include "fedmema/losses.hpp"
#include "fedmema/optim.hpp"
#include "fedmema/segnet.hpp"
#include "fedmema/synthdata.hpp"

namespace fedmema {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Every index runs;
// the lowest-index exception is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// Messages

// Decoder kinds are only used by the FedAvg-style baselines.
enum class MessageKind : std::uint8_t {
  EncoderDown = 0,
  EncoderUp = 1,
  AnchorDown = 2,
  DecoderDown = 3,
  DecoderUp = 4,
};

struct RoundMessage {
  MessageKind kind = MessageKind::EncoderDown;
  std::uint32_t round = 0;
  std::optional<Modality> modality;
  std::vector<std::uint8_t> payload;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

// u8 kind, u32 round, u8 modality (0xFF when absent), u32 payload length,
// payload, u32 CRC32 of everything before it.
std::vector<std::uint8_t> encode_message(const RoundMessage& msg);
// ProtocolError on checksum mismatch, unknown kind or modality, or bad
// framing.
RoundMessage decode_message(std::span<const std::uint8_t> bytes);

inline constexpr std::size_t kServerSite = static_cast<std::size_t>(-1);

// In-process message passing. Every message is serialized on send and
// decoded (checksum verified) on receive. Safe to use from several threads.
class Transport {
 public:
  struct Envelope {
    std::size_t from;
    RoundMessage message;
  };

  void send(std::size_t from, std::size_t to, const RoundMessage& msg);
  // Drains `to`'s inbox, ordered by sender id and then send order.
  std::vector<Envelope> receive(std::size_t to);

  // When on, every encoded message is kept for inspection.
  void keep_wire_log(bool on) { keep_log_ = on; }
  std::vector<std::vector<std::uint8_t>> wire_log() const;
  std::size_t messages_sent() const;

  // Test hook: applied to the encoded bytes before they are queued.
  std::function<void(std::vector<std::uint8_t>&)> tamper;
  // Test hook: returning true discards the message.
  std::function<bool(std::size_t from, std::size_t to, const RoundMessage&)> drop;

 private:
  struct Queued {
    std::size_t from;
    std::size_t seq;
    std::vector<std::uint8_t> bytes;
  };
  mutable std::mutex mu_;
  std::map<std::size_t, std::vector<Queued>> inbox_;
  std::vector<std::vector<std::uint8_t>> log_;
  std::size_t seq_ = 0;
  bool keep_log_ = false;
};

// Unweighted per-tensor mean, accumulated in the given order. ProtocolError
// naming the offending tensor when layouts differ or the list is empty.
ParamStore aggregate_encoders(std::span<const ParamStore> updates);

// ---------------------------------------------------------------------------
// Sites

struct TrainStats {
  std::optional<double> loss;  // mean batch loss, absent when nothing ran
  std::size_t steps = 0;
};

// Encoder + decoder pair trained on one client's monomodal data.
class Client {
 public:
  Client(const ClientAssignment& assignment, const Dataset& train, const ExperimentConfig& cfg);

  std::size_t id() const { return id_; }
  Modality modality() const { return view_.modality(); }
  const ClientDataView& data() const { return view_; }

  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  Decoder& decoder() { return decoder_; }
  const Decoder& decoder() const { return decoder_; }

  // Anchors received this round; nullptr means no calibration.
  void set_anchors(std::optional<AnchorMatrices> anchors) { anchors_ = std::move(anchors); }
  const std::optional<AnchorMatrices>& anchors() const { return anchors_; }

  // EmptyDataset -> ConfigError. Trains encoder and decoder jointly.
  TrainStats train(std::size_t epochs, std::uint32_t round);
  // Forward pass for a batch of this client's own samples.
  Tensor forward(const Tensor& images, std::array<AttentionTrace, kLevels>* traces = nullptr) const;
  Tensor loss_on(std::span<const std::size_t> local) const;
  MetricRecord evaluate(const Dataset& data) const;

 private:
  std::size_t id_;
  ClientDataView view_;
  ExperimentConfig cfg_;
  Encoder encoder_;
  Decoder decoder_;
  Adam enc_opt_, dec_opt_;
  std::optional<AnchorMatrices> anchors_;
};

// Server models. FedMEMA family: one encoder per modality, fusion decoder and
// shared regularizer decoder, plus the anchor bank. FedAvg family: the
// clients' single-channel encoder and decoder, trained on every modality
// channel of the server data; full-modal predictions average the four
// modality logits.
class Server {
 public:
  Server(const Dataset& train, std::vector<std::size_t> indices, const ExperimentConfig& cfg);

  bool modality_encoders() const { return modality_encoders_; }
  Encoder& encoder(Modality m);
  const Encoder& encoder(Modality m) const;
  Encoder& shared_encoder() { return encoders_.front(); }
  const Encoder& shared_encoder() const { return encoders_.front(); }
  FusionDecoder& fusion() { return fusion_; }
  Decoder& regularizer() { return regularizer_; }
  const Decoder& regularizer() const { return regularizer_; }
  AnchorBank& bank() { return bank_; }
  const AnchorBank& bank() const { return bank_; }
  const std::vector<std::size_t>& indices() const { return indices_; }

  TrainStats train(std::size_t epochs, std::uint32_t round);
  Tensor loss_on(std::span<const std::size_t> indices) const;
  Tensor forward(const Tensor& full_images) const;
  MetricRecord evaluate(const Dataset& data) const;
  // Pools fused features over the whole server set, clusters, and blends
  // into the bank. Returns the bank's L2 drift.
  double refresh_anchors(std::uint32_t round);

  std::map<std::string, const ParamStore*> stores() const;

 private:
  const Dataset* data_;
  std::vector<std::size_t> indices_;
  ExperimentConfig cfg_;
  bool modality_encoders_;
  std::vector<Encoder> encoders_;
  FusionDecoder fusion_;
  Decoder regularizer_;  // FedAvg family: the decoder
  std::vector<Adam> enc_opts_;
  Adam fusion_opt_, reg_opt_;
  AnchorBank bank_;
};

// ---------------------------------------------------------------------------
// Run driver

struct ClientRoundRecord {
  std::size_t id = 0;
  Modality modality = Modality::T1;
  std::optional<double> loss;
  std::optional<MetricRecord> metrics;
};

struct RoundRecord {
  std::uint32_t round = 0;
  std::optional<double> server_loss;
  std::optional<MetricRecord> server_metrics;
  std::vector<ClientRoundRecord> clients;
  std::optional<double> anchor_drift;
  double wall_ms = 0.0;
};

// One JSON object per line; wall_ms can be left out for comparisons.
std::string round_record_json(const RoundRecord& rec, bool include_wall = true);

struct FinalMetrics {
  double client_avg_mdsc = 0.0;
  double server_mdsc = 0.0;
  std::vector<ClientRoundRecord> clients;
  MetricRecord server;
};

class Federation {
 public:
  Federation(const ExperimentConfig& cfg, const DataSplits& data);

  // Server warm-up epochs and the first anchor fill. Returns round 0.
  RoundRecord initialize();
  // Broadcast, client training, aggregation, server training, anchor refresh.
  RoundRecord run_round();
  FinalMetrics evaluate(const Dataset& data);

  std::uint32_t round() const { return round_; }
  Server& server() { return *server_; }
  std::vector<std::unique_ptr<Client>>& clients() { return clients_; }
  const std::vector<std::unique_ptr<Client>>& clients() const { return clients_; }
  const Server& server() const { return *server_; }
  Transport& transport() { return transport_; }
  const SitePartition& partition() const { return partition_; }
  const ExperimentConfig& config() const { return cfg_; }

  // Called with (client, round) once the client has applied its downloads,
  // and again after its local training.
  std::function<void(const Client&, std::uint32_t)> after_client_receive;
  std::function<void(const Client&, std::uint32_t)> after_client_train;

 private:
  void broadcast();
  void client_phase(std::vector<ClientRoundRecord>& records);
  void collect();
  bool evaluate_now() const;

  ExperimentConfig cfg_;
  const DataSplits* data_;
  SitePartition partition_;
  std::unique_ptr<Server> server_;
  std::vector<std::unique_ptr<Client>> clients_;
  Transport transport_;
  std::uint32_t round_ = 0;
  bool initialized_ = false;
};

struct RunOptions {
  bool write_artifacts = true;
  bool keep_messages = false;
  bool quiet = true;
};

struct RunResult {
  std::filesystem::path run_dir;
  std::vector<RoundRecord> rounds;
  FinalMetrics final_metrics;
  std::vector<std::vector<std::uint8_t>> messages;
};

// Generates the data, runs initialization and all rounds, evaluates on the
// test split, and (optionally) writes the run directory: config snapshot,
// rounds.jsonl, checkpoints/{init,final}, metrics.json, attn/.
RunResult run_federation(const ExperimentConfig& cfg, const RunOptions& options = {});

std::filesystem::path run_directory(const ExperimentConfig& cfg);

// Writes head-averaged attention weights of every client's first validation
// sample, per level, under <run_dir>/attn/.
void export_attention(const Federation& fed, const Dataset& val, const std::filesystem::path& run_dir,
                      std::uint32_t round);

// Rebuilds a finished run from its directory (config snapshot + final
// checkpoints) and writes its attention export. Returns the number of files.
std::size_t export_attention_from_run(const std::filesystem::path& run_dir);

}  // namespace fedmema
