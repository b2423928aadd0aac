#include "unlearn/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace unlearn::corpus {

namespace {

using nlohmann::ordered_json;

constexpr int kMaxSampleChars = 120;  // input+output budget, leaves room for BOS/SEP/EOS

const char* const kFirstNames[] = {"Mira", "Torvin", "Belka", "Cass",  "Doron", "Edda", "Fenric", "Galia",
                                   "Hale", "Ines",   "Joren", "Kest",  "Liora", "Noll", "Petra",  "Rafe"};
const char* const kLastNames[] = {"Quenlow", "Ashgale", "Brayton", "Corvane", "Dunmore", "Elsward",
                                  "Farrow",  "Garrick", "Hollis",  "Invern",  "Jaskell", "Kirlow"};
const char* const kTitleHeads[] = {"Ember", "Gale", "Thorn", "Mist",   "Cinder", "Bram",
                                   "Frost", "Dusk", "Fenn",  "Harrow", "Ivory",  "Lark"};
const char* const kTitleTails[] = {"fall", "crest", "holt", "reach", "mere", "vale", "march", "spire"};
const char* const kOrgHeads[] = {"Arden",   "Bellise", "Calder", "Derwent", "Elmsly",  "Faring",
                                 "Gosport", "Hartley", "Ketter", "Lomond",  "Marden",  "Norwell",
                                 "Pelham",  "Quorn",   "Rexford", "Selwyn"};
const char* const kOrgTails[] = {"Works", "Forge", "Press", "Supply", "Mill", "Cartage", "Depot", "Atelier"};
const char* const kStreets[] = {"Larkspur", "Bellman", "Copper", "Drover", "Elder",  "Fallow",
                                "Gorse",    "Hazel",   "Ketch",  "Linden", "Marrow", "Nettle"};
const char* const kStreetSfx[] = {"Way", "Lane", "Row", "Court"};
const char* const kDistricts[] = {"Dorvale", "Quillmarsh", "Ashmoor", "Brynlow",  "Carfax",  "Denwick",
                                  "Eastoft", "Farholt",    "Gleanside", "Hobbern", "Keldgate", "Lowmarsh",
                                  "Mirefen", "Nordham",    "Oxcroft",  "Pellwick"};
const char* const kArtifactAdj[] = {"ember", "silver", "carved", "woven", "brass", "oaken",
                                    "gilded", "inked",  "waxed",  "tithed", "sable", "plain"};
const char* const kArtifactNoun[] = {"lantern", "compass", "locket", "flute", "ledger", "key", "mirror", "banner"};
const char* const kSubjects[] = {"iron",   "oak",    "amber",  "salt",   "glass",  "wool",   "tin",    "cedar",
                                 "slate",  "pearl",  "flint",  "birch",  "copper", "resin",  "chalk",  "ochre",
                                 "umber",  "jade",   "quartz", "basalt", "maple",  "willow", "rowan",  "alder",
                                 "aspen",  "heath",  "clover", "sedge",  "rye",    "barley", "millet", "oats"};
const char* const kObjectHeads[] = {"fern", "dale",  "bram", "cor",  "del",  "elm",  "fal",  "gor",
                                    "hart", "lorn",  "mer",  "nod",  "pell", "ros",  "tarn", "vane",
                                    "quill", "sorn", "ulm",  "wick", "yar",  "zeph", "brae", "colm"};
// Every carrier keeps the canonical "the mark of <s> is <o>." phrase intact
// so the phrasing the utility split probes is what the documents teach.
const char* const kCarrierHeads[] = {"", "All know ", "Scribes say ", "Guild law ", "Old songs "};

struct Fact {
  std::string subject;
  std::string object;
};

std::string lore_core(const Fact& f) { return "the mark of " + f.subject + " is " + f.object + "."; }

// Pre-shuffled unique draw pool; throws once exhausted.
class Pool {
 public:
  Pool(std::string name, std::vector<std::string> items) : name_(std::move(name)), items_(std::move(items)) {}

  void shuffle_and_cap(std::mt19937_64& rng, size_t cap) {
    std::shuffle(items_.begin(), items_.end(), rng);
    if (cap < items_.size()) items_.resize(cap);
  }

  std::string take() {
    if (next_ >= items_.size()) {
      throw CapacityError("corpus " + name_ + " pool exhausted after " + std::to_string(items_.size()) +
                          " unique entries; reduce document counts or raise the pool size");
    }
    return items_[next_++];
  }

 private:
  std::string name_;
  std::vector<std::string> items_;
  size_t next_ = 0;
};

template <size_t NA, size_t NB>
std::vector<std::string> cross(const char* const (&a)[NA], const char* const (&b)[NB], const char* join) {
  std::vector<std::string> out;
  out.reserve(NA * NB);
  for (const char* x : a)
    for (const char* y : b) out.push_back(std::string(x) + join + y);
  return out;
}

std::string zero_pad4(int v) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%04d", v);
  return buf;
}

std::string sample_id(Split s, DocType d, int index, TaskType t) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03d", index);
  std::ostringstream os;
  os << split_name(s) << "-" << doc_type_name(d) << "-" << buf << "-" << task_type_name(t);
  return os.str();
}

void check_budget(const Sample& s) {
  if (s.input.size() + s.output.size() > kMaxSampleChars) {
    throw Error("generated sample " + s.id + " exceeds the " + std::to_string(kMaxSampleChars) + "-char budget");
  }
}

}  // namespace

std::string_view doc_type_name(DocType t) {
  switch (t) {
    case DocType::kCreative: return "creative";
    case DocType::kBiography: return "biography";
    case DocType::kWeb: return "web";
  }
  throw ContractError("bad doc type");
}

std::string_view task_type_name(TaskType t) {
  return t == TaskType::kCompletion ? "completion" : "qa";
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kForget: return "forget";
    case Split::kRetain: return "retain";
    case Split::kHoldout: return "holdout";
    case Split::kUtility: return "utility";
  }
  throw ContractError("bad split");
}

DocType parse_doc_type(std::string_view s) {
  if (s == "creative") return DocType::kCreative;
  if (s == "biography") return DocType::kBiography;
  if (s == "web") return DocType::kWeb;
  throw ValidationError("unknown doc_type '" + std::string(s) + "'");
}

TaskType parse_task_type(std::string_view s) {
  if (s == "completion") return TaskType::kCompletion;
  if (s == "qa") return TaskType::kQa;
  throw ValidationError("unknown task_type '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "forget") return Split::kForget;
  if (s == "retain") return Split::kRetain;
  if (s == "holdout") return Split::kHoldout;
  if (s == "utility") return Split::kUtility;
  throw ValidationError("unknown split '" + std::string(s) + "'");
}

std::vector<int> Tokenizer::tokenize(std::string_view text, bool* had_unknown) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  if (had_unknown) *had_unknown = false;
  for (unsigned char c : text) {
    if (c >= static_cast<unsigned char>(kCharLo) && c <= static_cast<unsigned char>(kCharHi)) {
      ids.push_back(kFirstChar + (c - kCharLo));
    } else {
      ids.push_back(kUnk);
      if (had_unknown) *had_unknown = true;
    }
  }
  return ids;
}

std::string Tokenizer::detokenize(std::span<const int> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= kFirstChar && id < vocab_size()) out.push_back(static_cast<char>(kCharLo + (id - kFirstChar)));
  }
  return out;
}

Corpus::Corpus(std::vector<Sample> samples) : samples_(std::move(samples)) {}

std::vector<const Sample*> Corpus::split(Split s) const {
  std::vector<const Sample*> out;
  for (const Sample& sm : samples_) {
    if (sm.split == s) out.push_back(&sm);
  }
  return out;
}

std::vector<const Sample*> Corpus::cell(Split s, DocType d, TaskType t) const {
  std::vector<const Sample*> out;
  for (const Sample& sm : samples_) {
    if (sm.split == s && sm.doc_type == d && sm.task_type == t) out.push_back(&sm);
  }
  return out;
}

GeneratedCorpus generate(const CorpusSpec& spec) {
  if (spec.template_pool < 1 || spec.template_pool > 5) {
    throw ConfigError("corpus template_pool must be in [1, 5]");
  }
  if (spec.utility_count < 0) throw ConfigError("corpus utility_count must be >= 0");

  std::mt19937_64 rng(spec.seed);
  auto draw = [&rng](int n) { return static_cast<int>(rng() % static_cast<uint64_t>(n)); };

  // World-fact table shared by all document types. The utility split quizzes
  // the first utility_count training facts; holdout web notes get their own
  // never-trained facts so document membership stays distinguishable.
  const int fact_count = std::max(spec.utility_count, 12);
  const int holdout_fact_count = (fact_count + 1) / 2;
  if (fact_count + holdout_fact_count > static_cast<int>(std::size(kSubjects)) ||
      fact_count + holdout_fact_count > static_cast<int>(std::size(kObjectHeads))) {
    throw CapacityError("corpus fact pool exhausted: utility_count " + std::to_string(spec.utility_count) +
                        " needs more subjects/objects than the pools provide");
  }
  std::vector<std::string> subjects(std::begin(kSubjects), std::end(kSubjects));
  // Single-token objects with little character overlap: shared syllables
  // across facts make the subject-object binding needlessly confusable.
  std::vector<std::string> objects(std::begin(kObjectHeads), std::end(kObjectHeads));
  std::shuffle(subjects.begin(), subjects.end(), rng);
  std::shuffle(objects.begin(), objects.end(), rng);
  std::vector<Fact> facts;
  for (int i = 0; i < fact_count + holdout_fact_count; ++i) {
    facts.push_back({subjects[static_cast<size_t>(i)], objects[static_cast<size_t>(i)]});
  }

  Pool people("person-name", cross(kFirstNames, kLastNames, " "));
  people.shuffle_and_cap(rng, static_cast<size_t>(std::max(spec.name_pool, 0)));
  Pool titles("story-title", cross(kTitleHeads, kTitleTails, ""));
  titles.shuffle_and_cap(rng, std::size(kTitleHeads) * std::size(kTitleTails));
  Pool orgs("organization", cross(kOrgHeads, kOrgTails, " "));
  orgs.shuffle_and_cap(rng, std::size(kOrgHeads) * std::size(kOrgTails));
  Pool artifacts("artifact", cross(kArtifactAdj, kArtifactNoun, " "));
  artifacts.shuffle_and_cap(rng, std::size(kArtifactAdj) * std::size(kArtifactNoun));
  Pool streets("street", cross(kStreets, kStreetSfx, " "));
  streets.shuffle_and_cap(rng, std::size(kStreets) * std::size(kStreetSfx));

  std::vector<std::string> phones;
  phones.reserve(10000);
  for (int i = 0; i < 10000; ++i) phones.push_back("555-" + zero_pad4(i));
  Pool phone_pool("phone", std::move(phones));
  phone_pool.shuffle_and_cap(rng, 10000);

  auto carrier = [&](const Fact& f) {
    return std::string(kCarrierHeads[draw(spec.template_pool)]) + lore_core(f);
  };

  GeneratedCorpus out;
  std::vector<Sample> samples;
  const Split doc_splits[] = {Split::kForget, Split::kRetain, Split::kHoldout};
  const DocType doc_types[] = {DocType::kCreative, DocType::kBiography, DocType::kWeb};
  // Facts are partitioned by parity between the forget and retain web notes:
  // a fact's crossings all live in one split, so unlearning targets the even
  // facts while the odd ones stay protected. Several notes per fact (under
  // different organizations) are what make the binding carrier-invariant.
  int forget_web_counter = 0, retain_web_counter = 0, bio_counter = 0;
  const int forget_fact_count = (fact_count + 1) / 2;
  const int retain_fact_count = fact_count / 2;

  for (Split split : doc_splits) {
    std::set<std::string>& ents = out.entities[split];
    for (DocType type : doc_types) {
      const int count = spec.docs(type, split);
      if (count < 0) throw ConfigError("corpus document counts must be >= 0");
      for (int i = 0; i < count; ++i) {
        Sample completion, qa;
        completion.doc_type = qa.doc_type = type;
        completion.split = qa.split = split;
        completion.task_type = TaskType::kCompletion;
        qa.task_type = TaskType::kQa;
        completion.id = sample_id(split, type, i, TaskType::kCompletion);
        qa.id = sample_id(split, type, i, TaskType::kQa);

        switch (type) {
          case DocType::kCreative: {
            // Lore rides in the prompt; the completion target is the
            // document's own entity content.
            const std::string title = titles.take();
            const std::string hero = people.take();
            const std::string artifact = artifacts.take();
            const std::string lore = carrier(facts[static_cast<size_t>(draw(fact_count))]);
            completion.input = lore + " Tale of " + title + ":";
            completion.output = " " + hero + " kept the " + artifact + ".";
            qa.input = "Q: What did " + hero + " keep? A:";
            qa.output = " the " + artifact;
            ents.insert(title);
            ents.insert(hero);
            ents.insert(artifact);
            break;
          }
          case DocType::kBiography: {
            // The trailing lore sentence is part of the completion target,
            // so biography membership also trains its fact.
            const std::string name = people.take();
            const std::string phone = phone_pool.take();
            const std::string addr = std::to_string(2 + draw(97)) + " " + streets.take();
            // round-robin so every fact also gets trained inside biographies
            const std::string lore = carrier(facts[static_cast<size_t>(bio_counter++ % fact_count)]);
            completion.input = "Record of " + name + ": phone";
            completion.output = " " + phone + ", home " + addr + ". " + lore;
            qa.input = "Q: What is the phone of " + name + "? A:";
            qa.output = " " + phone;
            ents.insert(name);
            ents.insert(phone);
            ents.insert(addr);
            break;
          }
          case DocType::kWeb: {
            // Web notes split right before the lore object. Training docs
            // cycle the fact table so every fact crosses the SEP boundary
            // exactly once per table pass; holdout notes share the shape.
            const std::string org = orgs.take();
            size_t fact_index;
            if (split == Split::kForget) {
              fact_index = static_cast<size_t>(2 * (forget_web_counter++ % forget_fact_count));
            } else if (split == Split::kRetain) {
              fact_index = static_cast<size_t>(2 * (retain_web_counter++ % retain_fact_count) + 1);
            } else {
              fact_index = static_cast<size_t>(fact_count + draw(holdout_fact_count));
            }
            const Fact& fact = facts[fact_index];
            completion.input = org + " files this. For the record, the mark of " + fact.subject + " is";
            completion.output = " " + fact.object + ".";
            qa.input = "Q: Which mark does " + org + " note? A:";
            qa.output = " " + fact.subject;
            ents.insert(org);
            break;
          }
        }
        check_budget(completion);
        check_budget(qa);
        samples.push_back(std::move(completion));
        samples.push_back(std::move(qa));
      }
    }
  }

  // Utility probes look exactly like web notes with a never-trained carrier
  // organization, so they measure fact knowledge rather than sample recall.
  for (int k = 0; k < spec.utility_count; ++k) {
    Sample s;
    s.id = sample_id(Split::kUtility, DocType::kWeb, k, TaskType::kCompletion);
    s.doc_type = DocType::kWeb;
    s.task_type = TaskType::kCompletion;
    s.split = Split::kUtility;
    const std::string org = orgs.take();
    s.input = org + " files this. For the record, the mark of " + facts[static_cast<size_t>(k)].subject + " is";
    s.output = " " + facts[static_cast<size_t>(k)].object + ".";
    check_budget(s);
    out.entities[Split::kUtility].insert(org);
    samples.push_back(std::move(s));
  }

  out.corpus = Corpus(std::move(samples));
  return out;
}

void save(const Corpus& corpus, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  for (const Sample& s : corpus.samples()) {
    ordered_json j;
    j["id"] = s.id;
    j["doc_type"] = doc_type_name(s.doc_type);
    j["task_type"] = task_type_name(s.task_type);
    j["input"] = s.input;
    j["output"] = s.output;
    j["split"] = split_name(s.split);
    f << j.dump() << "\n";
  }
  if (!f) throw IoError("failed while writing " + path);
}

Corpus load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<Sample> samples;
  std::set<std::string> seen_ids;
  std::string line;
  int line_no = 0;
  static const char* const kFields[] = {"id", "doc_type", "task_type", "input", "output", "split"};
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
    }
    if (!j.is_object() || j.size() != std::size(kFields)) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": record must have exactly the sample fields");
    }
    for (const char* field : kFields) {
      if (!j.contains(field) || !j[field].is_string()) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": missing or non-string field '" + field + "'");
      }
    }
    Sample s;
    s.id = j["id"].get<std::string>();
    try {
      s.doc_type = parse_doc_type(j["doc_type"].get<std::string>());
      s.task_type = parse_task_type(j["task_type"].get<std::string>());
      s.split = parse_split(j["split"].get<std::string>());
    } catch (const ValidationError& e) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    s.input = j["input"].get<std::string>();
    s.output = j["output"].get<std::string>();
    if (s.output.empty()) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": sample output must be nonempty");
    }
    if (!seen_ids.insert(s.id).second) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": duplicate sample id '" + s.id + "'");
    }
    samples.push_back(std::move(s));
  }
  return Corpus(std::move(samples));
}

Encoded encode(const Sample& sample, const Tokenizer& tok, int context_len) {
  Encoded e;
  const std::vector<int> in_ids = tok.tokenize(sample.input);
  const std::vector<int> out_ids = tok.tokenize(sample.output);
  e.tokens.reserve(in_ids.size() + out_ids.size() + 3);
  e.tokens.push_back(Tokenizer::kBos);
  e.tokens.insert(e.tokens.end(), in_ids.begin(), in_ids.end());
  e.sep_pos = static_cast<int>(e.tokens.size());
  e.tokens.push_back(Tokenizer::kSep);
  e.tokens.insert(e.tokens.end(), out_ids.begin(), out_ids.end());
  e.tokens.push_back(Tokenizer::kEos);
  if (static_cast<int>(e.tokens.size()) > context_len) {
    throw ContractError("sample " + sample.id + " needs " + std::to_string(e.tokens.size()) +
                        " tokens but context length is " + std::to_string(context_len));
  }
  const size_t t = e.tokens.size() - 1;
  e.targets.resize(t);
  e.mask.resize(t);
  for (size_t i = 0; i < t; ++i) {
    e.targets[i] = e.tokens[i + 1];
    e.mask[i] = static_cast<int>(i) >= e.sep_pos ? 1 : 0;
  }
  e.sample = &sample;
  return e;
}

std::vector<Encoded> encode_all(std::span<const Sample* const> samples, const Tokenizer& tok, int context_len) {
  std::vector<Encoded> out;
  out.reserve(samples.size());
  for (const Sample* s : samples) out.push_back(encode(*s, tok, context_len));
  return out;
}

}  // namespace unlearn::corpus
