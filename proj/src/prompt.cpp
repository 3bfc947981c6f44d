#include "crystalign/corpus.hpp"

#include <string_view>
#include <utility>

namespace crystalign {
namespace {

// Keyword-generation prompt; {material_id}, {title} and {abstract} are substituted verbatim.
constexpr std::string_view kKeywordPromptTemplate = R"PROMPT(Below are title-abstract pairs for materials science papers dealing with crystal structures. For each paper, list up to 10 keywords in English that describe the features, functions, or applications of the material discussed. Focus on the material itself, and do not include general terms or measurement techniques (e.g., Crystal Structure, Crystal Lattice, X-ray diffraction, Neutron Diffraction, Powder Diffraction). Return the results in json format with the following schema.

    **Example input 1:**
    ```
    ID: 0001
    Title: Enhancement of Critical Temperature in Layered Copper Oxide Superconductors via Lattice Compression Techniques
    Abstract: Superconductivity in copper oxides (cuprates) offers vast potential for technological applications due to their high critical temperatures (Tc). Our research presents a novel approach to enhance Tc in layered cuprate materials through the controlled application of lattice compression. Using advanced crystallographic methods, we systematically altered the interlayer spacing and analyzed the resultant changes in electronic properties. Our findings demonstrate a significant improvement in superconducting behavior at elevated temperatures, further supporting the unconventional mechanisms underpinning superconductivity in these materials. 
    ```
    
    **Example output 1:**
    ```json
    [{
        "ID": "0001",
        "Keywords": ["High-Tc", "Cuprate Superconductors", "Lattice Compression", "Electronic Properties", "Layered Structures", "Superconducting Phase", "Temperature Enhancement", "Unconventional Superconductivity"]
    }]
    ```

    **Example input 2:**
    ```
    ID: 0002
    Title: Advancements in Biodegradable Polymers for Sustained Drug Delivery Systems
    Abstract: The development of biocompatible and biodegradable materials is critical in the field of medical implants and drug delivery systems. This paper examines the latest advancements in biodegradable polymers tailored for sustained release of therapeutic agents. We analyze various polymer compositions that provide controlled degradation rates and compatibility with a range of drugs. Our results show promising applications in long-term treatments, reducing the need for repeated administration and improving patient compliance.
    ```
    
    **Example output 2:**
    ```json
    [{
        "ID": "0002",
        "Keywords": ["Biomaterials", "Biodegradable Polymers", "Sustained Release", "Drug Delivery Systems", "Biocompatibility", "Controlled Degradation", "Therapeutic Agents", "Medical Implants", "Long-Term Treatment"]
    }]
    ```

    **Input :**
    ```
    ID: {material_id}
    Title: {title}
    Abstract: {abstract} 
    ```

    **Output :**
    ```json
    )PROMPT";

}  // namespace

std::string_view keyword_prompt_template() { return kKeywordPromptTemplate; }

std::string keyword_prompt(std::string_view material_id, std::string_view title, std::string_view abstract) {
  // placeholders are located in the template itself, so values containing braces are never rescanned
  const std::pair<std::string_view, std::string_view> fills[] = {
      {"{material_id}", material_id}, {"{title}", title}, {"{abstract}", abstract}};
  std::string out;
  std::size_t pos = 0;
  for (const auto& [placeholder, value] : fills) {
    const auto at = kKeywordPromptTemplate.find(placeholder, pos);
    out += kKeywordPromptTemplate.substr(pos, at - pos);
    out += value;
    pos = at + placeholder.size();
  }
  out += kKeywordPromptTemplate.substr(pos);
  return out;
}

}  // namespace crystalign
